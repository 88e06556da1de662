//! Evaluation metrics: multi-label AUC / hamming / subset accuracy for
//! tool presence, and per-frame accuracy with per-class precision,
//! recall and F1 for phase recognition.
//!
//! Hamming accuracy is the agreement fraction (1 minus normalized
//! hamming distance); AUC is the exact Mann-Whitney statistic with ties
//! half-credited.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Binary ground truth plus scores in [0,1] for multi-label evaluation.
#[derive(Debug, Clone)]
pub struct BinaryPredictionSet {
    pub ground_truth: Matrix,
    pub scores: Matrix,
    pub threshold: f64,
}

impl BinaryPredictionSet {
    pub fn new(ground_truth: Matrix, scores: Matrix) -> Result<Self> {
        Self::with_threshold(ground_truth, scores, 0.5)
    }

    pub fn with_threshold(ground_truth: Matrix, scores: Matrix, threshold: f64) -> Result<Self> {
        if ground_truth.rows != scores.rows || ground_truth.cols != scores.cols {
            return Err(Error::shape(
                "binary prediction set",
                format!("{}x{}", ground_truth.rows, ground_truth.cols),
                format!("{}x{}", scores.rows, scores.cols),
            ));
        }
        if ground_truth.rows == 0 {
            return Err(Error::EmptyInput("binary prediction set with N = 0"));
        }
        if let Some(v) = ground_truth.data.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::InvalidInput(format!(
                "ground truth must be binary, found {v}"
            )));
        }
        if let Some(v) = scores.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "scores must lie in [0,1], found {v}"
            )));
        }
        Ok(BinaryPredictionSet {
            ground_truth,
            scores,
            threshold,
        })
    }

    fn predicted_bit(&self, r: usize, c: usize) -> f64 {
        if self.scores.get(r, c) >= self.threshold {
            1.0
        } else {
            0.0
        }
    }
}

/// Gold and predicted phase ids per frame.
#[derive(Debug, Clone)]
pub struct PhasePredictionSet {
    pub gold: Vec<usize>,
    pub predicted: Vec<usize>,
    pub num_classes: usize,
}

impl PhasePredictionSet {
    pub fn new(gold: Vec<usize>, predicted: Vec<usize>, num_classes: usize) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::EmptyInput("phase prediction set"));
        }
        if gold.len() != predicted.len() {
            return Err(Error::shape(
                "phase prediction set",
                gold.len(),
                predicted.len(),
            ));
        }
        if let Some(id) = gold.iter().chain(&predicted).find(|id| **id >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "phase id {id} out of range 0..{num_classes}"
            )));
        }
        Ok(PhasePredictionSet {
            gold,
            predicted,
            num_classes,
        })
    }
}

/// Mean fraction of label bits on which prediction and ground truth agree.
pub fn hamming_accuracy(set: &BinaryPredictionSet) -> f64 {
    let (n, c) = (set.ground_truth.rows, set.ground_truth.cols);
    let mut total = 0.0;
    for r in 0..n {
        let mut agree = 0usize;
        for j in 0..c {
            if set.ground_truth.get(r, j) == set.predicted_bit(r, j) {
                agree += 1;
            }
        }
        total += agree as f64 / c as f64;
    }
    total / n as f64
}

/// Fraction of instances whose full label vector matches exactly.
pub fn subset_accuracy(set: &BinaryPredictionSet) -> f64 {
    let (n, c) = (set.ground_truth.rows, set.ground_truth.cols);
    let exact = (0..n)
        .filter(|&r| (0..c).all(|j| set.ground_truth.get(r, j) == set.predicted_bit(r, j)))
        .count();
    exact as f64 / n as f64
}

/// Exact ROC-AUC as the Mann-Whitney statistic with half credit for ties.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|l| **l == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(
            "auc requires at least one positive and one negative label".into(),
        ));
    }
    // average ranks over ties, then the rank-sum formula
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-class AUC over classes with both labels present, plus their mean.
/// Classes missing a label are reported as `None` and skipped in the mean.
pub fn mean_auc(set: &BinaryPredictionSet) -> Result<(Vec<Option<f64>>, f64)> {
    let (n, c) = (set.ground_truth.rows, set.ground_truth.cols);
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..c {
        let labels: Vec<f64> = (0..n).map(|r| set.ground_truth.get(r, j)).collect();
        let scores: Vec<f64> = (0..n).map(|r| set.scores.get(r, j)).collect();
        match auc(&scores, &labels) {
            Ok(a) => {
                sum += a;
                count += 1;
                per_class.push(Some(a));
            }
            Err(_) => per_class.push(None),
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput(
            "no class has both positive and negative labels".into(),
        ));
    }
    Ok((per_class, sum / count as f64))
}

/// Per-class precision/recall/F1 plus per-frame accuracy and macro F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub per_frame_accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
}

/// Confusion-matrix metrics for phase recognition.
///
/// A class absent from both gold and predictions is excluded from the
/// macro average; a class absent from gold but predicted counts as F1 0.
pub fn phase_metrics(set: &PhasePredictionSet) -> PhaseMetrics {
    let k = set.num_classes;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut correct = 0usize;
    for (&g, &p) in set.gold.iter().zip(&set.predicted) {
        if g == p {
            correct += 1;
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let mut precision = vec![0.0; k];
    let mut recall = vec![0.0; k];
    let mut f1 = vec![0.0; k];
    let mut macro_sum = 0.0;
    let mut macro_count = 0usize;
    for c in 0..k {
        let p_den = tp[c] + fp[c];
        let r_den = tp[c] + fn_[c];
        precision[c] = if p_den > 0 {
            tp[c] as f64 / p_den as f64
        } else {
            0.0
        };
        recall[c] = if r_den > 0 {
            tp[c] as f64 / r_den as f64
        } else {
            0.0
        };
        f1[c] = if precision[c] + recall[c] > 0.0 {
            2.0 * precision[c] * recall[c] / (precision[c] + recall[c])
        } else {
            0.0
        };
        let in_gold = r_den > 0;
        let predicted = p_den > 0;
        if in_gold || predicted {
            macro_sum += f1[c];
            macro_count += 1;
        }
    }
    PhaseMetrics {
        per_frame_accuracy: correct as f64 / set.gold.len() as f64,
        precision,
        recall,
        f1,
        macro_f1: if macro_count > 0 {
            macro_sum / macro_count as f64
        } else {
            0.0
        },
    }
}

/// Full evaluation report; tool-side or phase-side fields are `None` when
/// the corresponding task was not evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hamming_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_per_class: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_frame_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_per_class: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_per_class: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_per_class: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
}

impl MetricsReport {
    pub fn empty() -> Self {
        MetricsReport {
            schema: 1,
            hamming_accuracy: None,
            subset_accuracy: None,
            auc_per_class: None,
            mean_auc: None,
            per_frame_accuracy: None,
            precision_per_class: None,
            recall_per_class: None,
            f1_per_class: None,
            macro_f1: None,
        }
    }

    /// Tool-presence report from a binary prediction set.
    pub fn for_tools(set: &BinaryPredictionSet) -> Result<Self> {
        let (per_class, mean) = mean_auc(set)?;
        let mut r = MetricsReport::empty();
        r.hamming_accuracy = Some(hamming_accuracy(set));
        r.subset_accuracy = Some(subset_accuracy(set));
        r.auc_per_class = Some(per_class);
        r.mean_auc = Some(mean);
        Ok(r)
    }

    /// Phase-recognition report from gold/predicted id sequences.
    pub fn for_phases(set: &PhasePredictionSet) -> Self {
        let m = phase_metrics(set);
        let mut r = MetricsReport::empty();
        r.per_frame_accuracy = Some(m.per_frame_accuracy);
        r.precision_per_class = Some(m.precision);
        r.recall_per_class = Some(m.recall);
        r.f1_per_class = Some(m.f1);
        r.macro_f1 = Some(m.macro_f1);
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two-column `metric,value` CSV; per-class entries are flattened as
    /// `metric_class_NN`, absent AUC classes written as empty values.
    pub fn to_csv(&self) -> String {
        let mut rows: BTreeMap<String, String> = BTreeMap::new();
        rows.insert("schema".into(), self.schema.to_string());
        let scalar = |rows: &mut BTreeMap<String, String>, k: &str, v: &Option<f64>| {
            if let Some(v) = v {
                rows.insert(k.into(), format!("{v}"));
            }
        };
        scalar(&mut rows, "hamming_accuracy", &self.hamming_accuracy);
        scalar(&mut rows, "subset_accuracy", &self.subset_accuracy);
        scalar(&mut rows, "mean_auc", &self.mean_auc);
        scalar(&mut rows, "per_frame_accuracy", &self.per_frame_accuracy);
        scalar(&mut rows, "macro_f1", &self.macro_f1);
        if let Some(per) = &self.auc_per_class {
            for (i, a) in per.iter().enumerate() {
                let v = a.map(|a| format!("{a}")).unwrap_or_default();
                rows.insert(format!("auc_class_{i:02}"), v);
            }
        }
        for (name, vec) in [
            ("precision", &self.precision_per_class),
            ("recall", &self.recall_per_class),
            ("f1", &self.f1_per_class),
        ] {
            if let Some(vec) = vec {
                for (i, v) in vec.iter().enumerate() {
                    rows.insert(format!("{name}_class_{i:02}"), format!("{v}"));
                }
            }
        }
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&k);
            out.push(',');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(json_path).map_err(|e| Error::io(json_path, e))?;
        f.write_all(self.to_json()?.as_bytes())
            .map_err(|e| Error::io(json_path, e))?;
        let mut f = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(csv_path, e))?;
        Ok(())
    }
}
