//! `phaserec`: simulate, prepare, train, infer, and evaluate surgical
//! phase recognition runs from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, numerics), 2 usage
//! error, 3 invalid input data or configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phaserec_core::checkpoint::{self, CheckpointManifest};
use phaserec_core::dataio::{self, Split};
use phaserec_core::pipeline::{
    self, Dataset, InputKind, PhasePredictions, RunConfig, ToolHeadConfig, ANNOTATIONS_FILE,
    FEATURE_STORE_FILE, FRAME_TABLE_FILE, SPLIT_MANIFEST_FILE,
};
use phaserec_core::recurrent::RecurrentParams;
use phaserec_core::simgen::{self, SimConfig};
use phaserec_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "phaserec",
    version,
    about = "Surgical workflow phase recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth
    Simulate {
        /// Simulation config JSON; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory (created if absent)
        #[arg(long)]
        output: PathBuf,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-derive phase labels from annotations and optionally discard
    /// a fraction of frames showing no tool
    Prepare {
        /// Input dataset directory
        #[arg(long)]
        input: PathBuf,
        /// Output dataset directory (created if absent)
        #[arg(long)]
        output: PathBuf,
        /// Fraction of no-tool frames to drop, in [0, 1]
        #[arg(long, default_value_t = 0.0)]
        discard_no_tool_fraction: f64,
        /// Seed for the discard draw
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the phase classifier or the tool head
    Train {
        /// Dataset directory
        #[arg(long)]
        dataset: PathBuf,
        /// What to train
        #[arg(long, value_parser = ["phases", "tools"], default_value = "phases")]
        task: String,
        /// Run config JSON; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        output: PathBuf,
        /// Training log CSV output path
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-frame phase predictions for one split
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "holdout_test")]
        split: String,
        /// Predictions CSV output path
        #[arg(long)]
        output: PathBuf,
    },
    /// Metrics report for one split
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "holdout_test")]
        split: String,
        /// Report JSON output path
        #[arg(long)]
        json: PathBuf,
        /// Report CSV output path
        #[arg(long)]
        csv: PathBuf,
        /// Worker threads for per-video inference
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                Error::InvalidInput(_)
                | Error::EmptyInput(_)
                | Error::Parse { .. }
                | Error::Format { .. }
                | Error::ShapeMismatch { .. }
                | Error::Json(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            config,
            output,
            seed,
        } => simulate(config.as_deref(), &output, seed),
        Command::Prepare {
            input,
            output,
            discard_no_tool_fraction,
            seed,
        } => prepare(&input, &output, discard_no_tool_fraction, seed),
        Command::Train {
            dataset,
            task,
            config,
            output,
            log,
            seed,
        } => train(
            &dataset,
            &task,
            config.as_deref(),
            &output,
            log.as_deref(),
            seed,
        ),
        Command::Infer {
            dataset,
            checkpoint,
            split,
            output,
        } => infer(&dataset, &checkpoint, &split, &output),
        Command::Eval {
            dataset,
            checkpoint,
            split,
            json,
            csv,
            threads,
        } => eval(&dataset, &checkpoint, &split, &json, &csv, threads),
    }
}

/// Runs `write` against a temp path in the target's directory, then
/// renames over the target so readers never see partial output.
fn atomically(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    atomically(path, |tmp| {
        std::fs::write(tmp, content).map_err(|e| Error::io(tmp, e))
    })
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(Error::Json)
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn simulate(config: Option<&Path>, output: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SimConfig = read_json_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let held_out = cfg.n_validation + cfg.n_holdout + cfg.n_external;
    if held_out >= cfg.n_videos {
        return Err(Error::InvalidInput(format!(
            "{} videos cannot cover {held_out} validation/test assignments",
            cfg.n_videos
        )));
    }
    let model = simgen::model_from_config(&cfg);
    let videos = simgen::generate(&model, cfg.n_videos, cfg.duration_range_s, cfg.seed)?;

    let n_train = cfg.n_videos - held_out;
    let mut split = dataio::DatasetSplit::default();
    let mut frames = Vec::new();
    let mut annotations = std::collections::BTreeMap::new();
    let mut features = std::collections::BTreeMap::new();
    for (i, v) in videos.iter().enumerate() {
        let s = if i < n_train {
            Split::Train
        } else if i < n_train + cfg.n_validation {
            Split::Validation
        } else if i < n_train + cfg.n_validation + cfg.n_holdout {
            Split::HoldoutTest
        } else {
            Split::ExternalTest
        };
        split.assign(v.meta.video_id.clone(), s);
        annotations.insert(v.meta.video_id.clone(), v.annotation.clone());
        for f in &v.frames {
            if let Some(feat) = &f.features {
                features.insert((f.video_id.clone(), f.frame_index), feat.clone());
            }
        }
        frames.extend(v.frames.iter().cloned());
    }

    ensure_dir(output)?;
    atomically(&output.join(FRAME_TABLE_FILE), |p| {
        dataio::save_frame_table(&frames, p)
    })?;
    atomically(&output.join(ANNOTATIONS_FILE), |p| {
        dataio::save_annotations(&annotations, p)
    })?;
    atomically(&output.join(SPLIT_MANIFEST_FILE), |p| {
        dataio::save_split_manifest(&split, p)
    })?;
    if cfg.feature_dim > 0 {
        atomically(&output.join(FEATURE_STORE_FILE), |p| {
            dataio::save_feature_store(&features, cfg.feature_dim, p)
        })?;
    }
    let echo = serde_json::to_string_pretty(&cfg).map_err(Error::Json)? + "\n";
    write_text(&output.join("sim_config.json"), &echo)?;
    println!(
        "simulated {} videos ({} frames) into {}",
        cfg.n_videos,
        frames.len(),
        output.display()
    );
    Ok(())
}

fn prepare(input: &Path, output: &Path, discard_fraction: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&discard_fraction) {
        return Err(Error::InvalidInput(format!(
            "discard fraction must lie in [0, 1], got {discard_fraction}"
        )));
    }
    let raw = dataio::load_frame_table(&input.join(FRAME_TABLE_FILE))?;
    let annotations = dataio::load_annotations(&input.join(ANNOTATIONS_FILE))?;
    let split = dataio::load_split_manifest(&input.join(SPLIT_MANIFEST_FILE))?;
    let mut by_video: std::collections::BTreeMap<String, Vec<dataio::FrameRecord>> =
        std::collections::BTreeMap::new();
    for f in raw {
        by_video.entry(f.video_id.clone()).or_default().push(f);
    }
    let mut frames = Vec::new();
    for (video, records) in by_video {
        let ann = annotations
            .get(&video)
            .ok_or_else(|| Error::InvalidInput(format!("no phase annotation for video {video}")))?;
        frames.extend(dataio::annotate_phases(records, ann)?);
    }
    if discard_fraction > 0.0 {
        frames = dataio::discard_no_tool_frames(frames, discard_fraction, seed)?;
    }
    let feature_path = input.join(FEATURE_STORE_FILE);
    ensure_dir(output)?;
    atomically(&output.join(FRAME_TABLE_FILE), |p| {
        dataio::save_frame_table(&frames, p)
    })?;
    atomically(&output.join(ANNOTATIONS_FILE), |p| {
        dataio::save_annotations(&annotations, p)
    })?;
    atomically(&output.join(SPLIT_MANIFEST_FILE), |p| {
        dataio::save_split_manifest(&split, p)
    })?;
    if feature_path.exists() {
        // keep only feature vectors whose frame survived the discard
        let store = dataio::load_feature_store(&feature_path)?;
        let dim = store.values().next().map(|v| v.len()).unwrap_or(0);
        let kept: std::collections::BTreeMap<(String, u32), Vec<f64>> = frames
            .iter()
            .filter_map(|f| {
                store
                    .get(&(f.video_id.clone(), f.frame_index))
                    .map(|v| ((f.video_id.clone(), f.frame_index), v.clone()))
            })
            .collect();
        atomically(&output.join(FEATURE_STORE_FILE), |p| {
            dataio::save_feature_store(&kept, dim, p)
        })?;
    }
    println!("prepared {} frames into {}", frames.len(), output.display());
    Ok(())
}

fn train(
    dataset_dir: &Path,
    task: &str,
    config: Option<&Path>,
    output: &Path,
    log_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    match task {
        "phases" => {
            let mut cfg: RunConfig = read_json_config(config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let dataset = Dataset::load(dataset_dir, cfg.input == InputKind::Features)?;
            let (model, log) = pipeline::train_phase_model(&dataset, &cfg)?;
            let manifest = CheckpointManifest {
                architecture: model.architecture().to_string(),
                input_size: model.input_size(),
                hidden_sizes: model.hidden_sizes(),
                head_size: model.head_size(),
                seed: cfg.seed,
                training_config: serde_json::to_value(&cfg).map_err(Error::Json)?,
                optimizer: None,
            };
            atomically(output, |p| {
                checkpoint::save_recurrent(p, &model, &manifest, &[])
            })?;
            if let Some(lp) = log_path {
                write_text(lp, &log.to_csv())?;
            }
            let last_val = log
                .entries
                .iter()
                .rev()
                .find_map(|e| e.val_accuracy)
                .map(|v| format!(", final val accuracy {v:.4}"))
                .unwrap_or_default();
            println!("saved phase model to {}{last_val}", output.display());
        }
        "tools" => {
            let mut cfg: ToolHeadConfig = read_json_config(config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dataset = Dataset::load(dataset_dir, true)?;
            let (head, log) = pipeline::train_tool_head(&dataset, &cfg)?;
            let manifest = CheckpointManifest {
                architecture: "tool_head".to_string(),
                input_size: cfg.input_dim,
                hidden_sizes: Vec::new(),
                head_size: head.bias.len(),
                seed: cfg.seed,
                training_config: serde_json::to_value(&cfg).map_err(Error::Json)?,
                optimizer: None,
            };
            atomically(output, |p| {
                checkpoint::save_tool_head(p, &head, &manifest, &[])
            })?;
            if let Some(lp) = log_path {
                write_text(lp, &log.to_csv())?;
            }
            println!("saved tool head to {}", output.display());
        }
        other => {
            return Err(Error::InvalidInput(format!("unknown task '{other}'")));
        }
    }
    Ok(())
}

fn load_phase_model(path: &Path) -> Result<(RecurrentParams, RunConfig)> {
    let (model, manifest, _) = checkpoint::load_recurrent(path)?;
    let cfg: RunConfig = serde_json::from_value(manifest.training_config).map_err(Error::Json)?;
    Ok((model, cfg))
}

fn predict_split(
    model: &RecurrentParams,
    dataset: &Dataset,
    split: Split,
    cfg: &RunConfig,
    threads: Option<usize>,
) -> Result<PhasePredictions> {
    let videos = dataset.videos_in(split);
    if videos.is_empty() {
        return Err(Error::EmptyInput("no videos in the requested split"));
    }
    let workers = threads.unwrap_or(1).max(1).min(videos.len());
    let predictions: Vec<Result<Vec<usize>>> = if workers <= 1 {
        videos
            .iter()
            .map(|(_, records)| pipeline::infer_phases(model, records, cfg))
            .collect()
    } else {
        // deterministic: each video's result lands back at its own index
        let mut out: Vec<Option<Result<Vec<usize>>>> = (0..videos.len()).map(|_| None).collect();
        let chunk = videos.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (vids, slots) in videos.chunks(chunk).zip(out.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for ((_, records), slot) in vids.iter().zip(slots) {
                        *slot = Some(pipeline::infer_phases(model, records, cfg));
                    }
                });
            }
        });
        out.into_iter()
            .map(|r| r.expect("worker filled slot"))
            .collect()
    };
    let mut rows = Vec::new();
    for ((video, records), pred) in videos.iter().zip(predictions) {
        let pred = pred?;
        for (r, p) in records.iter().zip(pred) {
            let gold = r.phase.ok_or_else(|| {
                Error::InvalidInput(format!(
                    "frame {}:{} has no gold phase",
                    video, r.frame_index
                ))
            })?;
            rows.push((video.clone(), r.frame_index, gold, p));
        }
    }
    Ok(PhasePredictions { rows })
}

fn infer(dataset_dir: &Path, ckpt: &Path, split: &str, output: &Path) -> Result<()> {
    let split = parse_split(split)?;
    let (model, cfg) = load_phase_model(ckpt)?;
    let dataset = Dataset::load(dataset_dir, cfg.input == InputKind::Features)?;
    let predictions = predict_split(&model, &dataset, split, &cfg, None)?;
    write_text(output, &predictions.to_csv())?;
    println!(
        "wrote {} predictions to {}",
        predictions.rows.len(),
        output.display()
    );
    Ok(())
}

fn eval(
    dataset_dir: &Path,
    ckpt: &Path,
    split: &str,
    json: &Path,
    csv: &Path,
    threads: Option<usize>,
) -> Result<()> {
    let split = parse_split(split)?;
    let (manifest, _) = checkpoint::read_archive(ckpt)?;
    let report = if manifest.architecture == "tool_head" {
        let (head, _) = checkpoint::load_tool_head(ckpt)?;
        let cfg: ToolHeadConfig =
            serde_json::from_value(manifest.training_config).map_err(Error::Json)?;
        let dataset = Dataset::load(dataset_dir, true)?;
        pipeline::evaluate_tool_head(&head, &dataset, split, &cfg)?
    } else {
        let (model, cfg) = load_phase_model(ckpt)?;
        let dataset = Dataset::load(dataset_dir, cfg.input == InputKind::Features)?;
        let predictions = predict_split(&model, &dataset, split, &cfg, threads)?;
        let (gold, pred): (Vec<usize>, Vec<usize>) =
            predictions.rows.iter().map(|(_, _, g, p)| (*g, *p)).unzip();
        let set =
            phaserec_core::metrics::PhasePredictionSet::new(gold, pred, phaserec_core::NUM_PHASES)?;
        phaserec_core::metrics::MetricsReport::for_phases(&set)
    };
    write_text(json, &(report.to_json()? + "\n"))?;
    write_text(csv, &report.to_csv())?;
    if let Some(acc) = report.per_frame_accuracy {
        println!("per-frame accuracy: {acc:.4}");
    }
    if let Some(auc) = report.mean_auc {
        println!("mean AUC: {auc:.4}");
    }
    println!(
        "reports written to {} and {}",
        json.display(),
        csv.display()
    );
    Ok(())
}
