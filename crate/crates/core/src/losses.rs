//! Training objectives: multi-label sigmoid cross-entropy for the tool
//! head and multi-class softmax cross-entropy for the phase classifiers.
//! Both return the loss value together with the gradient with respect to
//! the pre-activation logits.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, sigmoid_scalar, Matrix};

/// Probabilities are clamped to [EPS, 1-EPS] before taking logs; the loss
/// is otherwise undefined at saturated predictions.
const EPS: f64 = 1e-12;

/// Binary label matrix plus logits for multi-label classification.
#[derive(Debug, Clone)]
pub struct MultiLabelBatch {
    pub labels: Matrix,
    pub logits: Matrix,
}

impl MultiLabelBatch {
    pub fn new(labels: Matrix, logits: Matrix) -> Result<Self> {
        if labels.rows != logits.rows || labels.cols != logits.cols {
            return Err(Error::shape(
                "multi-label batch",
                format!("{}x{}", labels.rows, labels.cols),
                format!("{}x{}", logits.rows, logits.cols),
            ));
        }
        if let Some(v) = labels.data.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::InvalidInput(format!(
                "multi-label labels must be binary, found {v}"
            )));
        }
        Ok(MultiLabelBatch { labels, logits })
    }
}

/// One-hot label matrix plus logits for multi-class classification.
#[derive(Debug, Clone)]
pub struct MultiClassBatch {
    pub labels: Matrix,
    pub logits: Matrix,
}

impl MultiClassBatch {
    pub fn new(labels: Matrix, logits: Matrix) -> Result<Self> {
        if labels.rows != logits.rows || labels.cols != logits.cols {
            return Err(Error::shape(
                "multi-class batch",
                format!("{}x{}", labels.rows, labels.cols),
                format!("{}x{}", logits.rows, logits.cols),
            ));
        }
        for r in 0..labels.rows {
            let row = labels.row(r);
            let ones = row.iter().filter(|v| **v == 1.0).count();
            let zeros = row.iter().filter(|v| **v == 0.0).count();
            if ones != 1 || zeros != row.len() - 1 {
                return Err(Error::InvalidInput(format!("label row {r} is not one-hot")));
            }
        }
        Ok(MultiClassBatch { labels, logits })
    }

    /// Build from class indices.
    pub fn from_indices(class_ids: &[usize], num_classes: usize, logits: Matrix) -> Result<Self> {
        let mut labels = Matrix::zeros(class_ids.len(), num_classes);
        for (r, &c) in class_ids.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "class id {c} out of range 0..{num_classes}"
                )));
            }
            labels.set(r, c, 1.0);
        }
        MultiClassBatch::new(labels, logits)
    }
}

/// Sigmoid cross-entropy averaged over both instances and classes,
/// with gradient (σ(z) − p) / (N·C) per logit.
pub fn sigmoid_ce(batch: &MultiLabelBatch) -> Result<(f64, Matrix)> {
    let n = batch.labels.rows;
    let c = batch.labels.cols;
    if n == 0 || c == 0 {
        return Err(Error::EmptyInput("sigmoid_ce on empty batch"));
    }
    let norm = 1.0 / (n as f64 * c as f64);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for i in 0..n * c {
        let z = batch.logits.data[i];
        let p = batch.labels.data[i];
        let s = sigmoid_scalar(z).clamp(EPS, 1.0 - EPS);
        loss -= p * s.ln() + (1.0 - p) * (1.0 - s).ln();
        grad.data[i] = (sigmoid_scalar(z) - p) * norm;
    }
    Ok((loss * norm, grad))
}

/// Softmax cross-entropy averaged over instances, with gradient
/// (φ(z) − p) / N per logit row. The log-sum-exp is computed stably.
pub fn softmax_ce(batch: &MultiClassBatch) -> Result<(f64, Matrix)> {
    let n = batch.labels.rows;
    let c = batch.labels.cols;
    if n == 0 || c == 0 {
        return Err(Error::EmptyInput("softmax_ce on empty batch"));
    }
    let norm = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for r in 0..n {
        let z = batch.logits.row(r);
        let lse = log_sum_exp(z);
        let labels = batch.labels.row(r);
        for (j, (&zj, &pj)) in z.iter().zip(labels).enumerate() {
            if pj == 1.0 {
                // log φ clamped below at ln ε
                loss -= (zj - lse).max(EPS.ln());
            }
            let phi = (zj - lse).exp();
            grad.set(r, j, (phi - pj) * norm);
        }
    }
    Ok((loss * norm, grad))
}
