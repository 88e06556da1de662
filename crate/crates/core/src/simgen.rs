//! Synthetic cataract-workflow generator: a Markov chain over the 14
//! phases emitting 21-bit tool vectors and optional feature vectors.
//! Datasets come with known ground truth plus a MAP oracle so training
//! and evaluation claims are checkable at desk scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{FrameRecord, PhaseAnnotation, VideoMeta};
use crate::error::{Error, Result};
use crate::numerics::{standard_normal, substream, Matrix};
use crate::{NUM_PHASES, NUM_TOOLS};

/// Extraction rate used for all synthetic videos.
pub const SIM_EXTRACTION_FPS: f64 = 3.0;

/// Generative workflow model: phase transition chain, per-phase
/// durations, per-tool Bernoulli emissions, bit-flip noise and optional
/// feature templates.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowModel {
    /// 14×14 row-stochastic matrix applied at phase exits.
    pub transition: Matrix,
    /// Uniform duration bounds (min_s, max_s) per phase.
    pub duration_s: Vec<(f64, f64)>,
    /// 14×21 per-tool presence probabilities per phase.
    pub emission: Matrix,
    /// Probability each emitted tool bit is flipped.
    pub noise_rate: f64,
    /// Feature dimension; 0 disables feature generation.
    pub feature_dim: usize,
    /// Per-phase feature templates (14 × D).
    pub phase_templates: Vec<Vec<f64>>,
    /// Per-tool feature templates (21 × D).
    pub tool_templates: Vec<Vec<f64>>,
    /// Stddev of gaussian feature noise.
    pub feature_noise: f64,
}

impl WorkflowModel {
    pub fn validate(&self) -> Result<()> {
        if self.transition.rows != NUM_PHASES || self.transition.cols != NUM_PHASES {
            return Err(Error::shape(
                "transition matrix",
                format!("{NUM_PHASES}x{NUM_PHASES}"),
                format!("{}x{}", self.transition.rows, self.transition.cols),
            ));
        }
        for r in 0..NUM_PHASES {
            let sum: f64 = self.transition.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "transition row {r} sums to {sum}, not 1"
                )));
            }
            if self
                .transition
                .row(r)
                .iter()
                .any(|p| !(0.0..=1.0).contains(p))
            {
                return Err(Error::InvalidInput(format!(
                    "transition row {r} out of [0,1]"
                )));
            }
        }
        if self.emission.rows != NUM_PHASES || self.emission.cols != NUM_TOOLS {
            return Err(Error::shape(
                "emission table",
                format!("{NUM_PHASES}x{NUM_TOOLS}"),
                format!("{}x{}", self.emission.rows, self.emission.cols),
            ));
        }
        if self.emission.data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(
                "emission probability out of [0,1]".into(),
            ));
        }
        if let Some((min, max)) = self
            .duration_s
            .iter()
            .find(|(min, max)| !(*min > 0.0) || max < min)
        {
            return Err(Error::InvalidInput(format!(
                "impossible phase duration range ({min}, {max})"
            )));
        }
        Ok(())
    }
}

/// Simulation knobs read from the config file; the structural model
/// (transitions, emissions, templates) is derived deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_videos: usize,
    pub n_validation: usize,
    pub n_holdout: usize,
    pub n_external: usize,
    pub duration_range_s: (f64, f64),
    pub noise_rate: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Phases whose duration range is quartered, for class-imbalance
    /// experiments.
    pub rare_phases: Vec<usize>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_videos: 14,
            n_validation: 2,
            n_holdout: 2,
            n_external: 0,
            duration_range_s: (120.0, 240.0),
            noise_rate: 0.05,
            feature_dim: 32,
            feature_noise: 0.3,
            rare_phases: Vec::new(),
            seed: 0,
        }
    }
}

/// Deterministic default model: mostly linear phase order with small
/// skips, 1-3 characteristic tools per phase, 5% bit-flip noise.
pub fn default_model() -> WorkflowModel {
    model_from_config(&SimConfig::default())
}

/// Builds the workflow model implied by a [`SimConfig`].
pub fn model_from_config(cfg: &SimConfig) -> WorkflowModel {
    let mut transition = Matrix::zeros(NUM_PHASES, NUM_PHASES);
    for r in 0..NUM_PHASES {
        if r == NUM_PHASES - 1 {
            transition.set(r, r, 1.0);
        } else {
            let next = r + 1;
            let skip = (r + 2).min(NUM_PHASES - 1);
            if skip == next {
                transition.set(r, next, 1.0);
            } else {
                transition.set(r, next, 0.9);
                transition.set(r, skip, 0.1);
            }
        }
    }
    let mut emission = Matrix::zeros(NUM_PHASES, NUM_TOOLS);
    for p in 0..NUM_PHASES {
        for t in 0..NUM_TOOLS {
            emission.set(p, t, 0.02);
        }
        // primary tool unique per phase, secondary shared across a few
        emission.set(p, p, 0.9);
        emission.set(p, 14 + (p % 7), 0.5);
        if p % 3 == 0 {
            emission.set(p, (p + 5) % 14, 0.35);
        }
    }
    let mut duration_s = vec![(8.0, 20.0); NUM_PHASES];
    for &p in &cfg.rare_phases {
        if p < NUM_PHASES {
            duration_s[p] = (2.0, 5.0);
        }
    }
    let mut rng = substream(cfg.seed, "feature-templates");
    let templates = |count: usize, scale: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        (0..count)
            .map(|_| {
                (0..cfg.feature_dim)
                    .map(|_| scale * standard_normal(rng))
                    .collect()
            })
            .collect()
    };
    let tool_templates = templates(NUM_TOOLS, 1.0, &mut rng);
    let phase_templates = templates(NUM_PHASES, 0.5, &mut rng);
    WorkflowModel {
        transition,
        duration_s,
        emission,
        noise_rate: cfg.noise_rate,
        feature_dim: cfg.feature_dim,
        phase_templates,
        tool_templates,
        feature_noise: cfg.feature_noise,
    }
}

/// One generated video with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub meta: VideoMeta,
    pub annotation: PhaseAnnotation,
    pub frames: Vec<FrameRecord>,
}

/// Generates `n_videos` videos, deterministic per seed. Distinct videos
/// use derived per-video substreams, so generation order is immaterial.
pub fn generate(
    model: &WorkflowModel,
    n_videos: usize,
    duration_range_s: (f64, f64),
    seed: u64,
) -> Result<Vec<SyntheticVideo>> {
    if n_videos == 0 {
        return Err(Error::InvalidInput("n_videos must be at least 1".into()));
    }
    if !(duration_range_s.0 > 0.0) || duration_range_s.1 < duration_range_s.0 {
        return Err(Error::InvalidInput(format!(
            "impossible video duration range {duration_range_s:?}"
        )));
    }
    model.validate()?;
    (0..n_videos)
        .map(|v| generate_video(model, &format!("sim_{v:03}"), duration_range_s, seed, v))
        .collect()
}

fn generate_video(
    model: &WorkflowModel,
    video_id: &str,
    duration_range_s: (f64, f64),
    seed: u64,
    index: usize,
) -> Result<SyntheticVideo> {
    let mut rng = substream(seed, &format!("video-{index}"));
    let duration = if duration_range_s.1 > duration_range_s.0 {
        rng.gen_range(duration_range_s.0..duration_range_s.1)
    } else {
        duration_range_s.0
    };
    // phase timeline
    let mut transitions = Vec::new();
    let mut t = 0.0;
    let mut phase = 0usize;
    while t < duration {
        transitions.push((phase, t));
        let (min, max) = model.duration_s[phase];
        t += if max > min {
            rng.gen_range(min..max)
        } else {
            min
        };
        if phase == NUM_PHASES - 1 {
            break;
        }
        let draw: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let row = model.transition.row(phase);
        let mut next = phase;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if draw < acc {
                next = j;
                break;
            }
        }
        phase = next;
    }
    let annotation = PhaseAnnotation::new(transitions)?;
    let meta = VideoMeta {
        video_id: video_id.to_string(),
        fps: 30.0,
        duration_s: duration,
    };
    let times = crate::dataio::extract_frame_times(&meta, SIM_EXTRACTION_FPS)?;
    let mut frames = Vec::with_capacity(times.len());
    for (frame_index, time_s) in times {
        let phase = annotation.phase_at(time_s).expect("timeline starts at 0");
        let mut tools = vec![0u8; NUM_TOOLS];
        for (c, bit) in tools.iter_mut().enumerate() {
            let mut b = rng.gen_bool(model.emission.get(phase, c));
            if model.noise_rate > 0.0 && rng.gen_bool(model.noise_rate) {
                b = !b;
            }
            *bit = b as u8;
        }
        let features = if model.feature_dim > 0 {
            let mut f = model.phase_templates[phase].clone();
            for (c, &bit) in tools.iter().enumerate() {
                if bit == 1 {
                    for (fv, tv) in f.iter_mut().zip(&model.tool_templates[c]) {
                        *fv += tv;
                    }
                }
            }
            for v in f.iter_mut() {
                *v += model.feature_noise * standard_normal(&mut rng);
            }
            Some(f)
        } else {
            None
        };
        frames.push(FrameRecord {
            video_id: video_id.to_string(),
            frame_index,
            time_s,
            tools,
            features,
            phase: Some(phase),
        });
    }
    Ok(SyntheticVideo {
        meta,
        annotation,
        frames,
    })
}

/// Per-frame accuracy of the maximum-a-posteriori phase given the true
/// emission table (with flip noise folded in) and a uniform phase prior.
/// Serves as the accuracy ceiling for trained models.
pub fn bayes_accuracy(model: &WorkflowModel, dataset: &[SyntheticVideo]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for video in dataset {
        for frame in &video.frames {
            let map = map_phase(model, &frame.tools);
            if Some(map) == frame.phase {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}

/// MAP phase for one observed tool vector; ties break to the lower id.
pub fn map_phase(model: &WorkflowModel, tools: &[u8]) -> usize {
    let eta = model.noise_rate;
    let mut best = 0usize;
    let mut best_ll = f64::NEG_INFINITY;
    for p in 0..NUM_PHASES {
        let mut ll = 0.0;
        for (c, &bit) in tools.iter().enumerate() {
            let e = model.emission.get(p, c);
            let q = (e * (1.0 - eta) + (1.0 - e) * eta).clamp(1e-12, 1.0 - 1e-12);
            ll += if bit == 1 { q.ln() } else { (1.0 - q).ln() };
        }
        if ll > best_ll {
            best_ll = ll;
            best = p;
        }
    }
    best
}
