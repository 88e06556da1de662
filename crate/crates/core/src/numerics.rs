//! Dense vector/matrix arithmetic, activations and a fully connected
//! layer with analytic gradients. Everything is `f64`; all stochastic
//! operations take an explicit seeded generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = Aᵀ x
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_transpose dimension mismatch");
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (yc, a) in y.iter_mut().zip(row) {
                *yc += a * xr;
            }
        }
        y
    }

    /// self += a bᵀ (outer product accumulation).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for (r, ar) in a.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (elem, bc) in row.iter_mut().zip(b) {
                *elem += ar * bc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise sigmoid.
pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// Elementwise tanh.
pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.tanh()).collect()
}

/// Softmax with max-subtraction so large logits do not overflow.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyInput("softmax of empty vector"));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// log(Σ exp(z)) computed stably.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Fully connected layer y = Wx + b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayer {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("dense_forward", self.in_dim(), x.len()));
        }
        let mut y = self.weights.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        Ok(y)
    }

    /// Gradients of a scalar loss through y = Wx + b given dL/dy.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<DenseGrads> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("dense_backward input", self.in_dim(), x.len()));
        }
        if grad_out.len() != self.out_dim() {
            return Err(Error::shape(
                "dense_backward grad",
                self.out_dim(),
                grad_out.len(),
            ));
        }
        let mut grad_weights = Matrix::zeros(self.out_dim(), self.in_dim());
        grad_weights.add_outer(grad_out, x);
        let grad_x = self.weights.matvec_transpose(grad_out);
        Ok(DenseGrads {
            weights: grad_weights,
            bias: grad_out.to_vec(),
            input: grad_x,
        })
    }
}

/// Gradient triple from [`DenseLayer::backward`].
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

/// Deterministic generator for a named substream of a master seed.
///
/// Every stochastic operation in the crate draws from one of these, so a
/// single `--seed` reproduces a run byte-for-byte.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    // splitmix-style mixing of the seed with a label hash
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Matrix with i.i.d. N(mean, stddev²) entries, deterministic per generator state.
pub fn gaussian_matrix(
    rows: usize,
    cols: usize,
    mean: f64,
    stddev: f64,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    assert!(stddev >= 0.0, "negative stddev");
    let mut m = Matrix::zeros(rows, cols);
    for v in &mut m.data {
        *v = mean + stddev * standard_normal(rng);
    }
    m
}

/// Matrix with i.i.d. Uniform(-bound, bound) entries.
pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in &mut m.data {
        *v = rng.gen_range(-bound..bound);
    }
    m
}

/// One standard normal draw (Box-Muller, single value per call for
/// platform-independent reproducibility).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(&[0.0]), vec![0.5]);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[0.3, 1.7, -4.2, 10.0, -50.0, 700.0] {
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((s - 1.0).abs() < 1e-12, "x={x} sum={s}");
        }
    }

    #[test]
    fn sigmoid_of_one() {
        // 1/(1+e^-1) to 10 decimals
        assert!((sigmoid_scalar(1.0) - 0.7310585786).abs() < 1e-9);
    }

    #[test]
    fn softmax_uniform_logits() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_known_values() {
        // direct evaluation of e^z / Σ e^z
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        assert!((p[0] - 0.09003057).abs() < 1e-8);
        assert!((p[1] - 0.24472847).abs() < 1e-8);
        assert!((p[2] - 0.66524096).abs() < 1e-8);
    }

    #[test]
    fn softmax_shift_invariance_and_overflow() {
        // spread kept under ~709 so the smallest exp stays normal-positive
        let z = [700.0, 699.0, 0.0];
        let p = softmax(&z).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.5).collect();
        let q = softmax(&shifted).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
            assert!(*a > 0.0);
        }
    }

    #[test]
    fn softmax_empty_errors() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn dense_forward_known() {
        let layer = DenseLayer {
            weights: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            bias: vec![0.5, -0.5],
        };
        assert_eq!(layer.forward(&[1.0, 1.0]).unwrap(), vec![3.5, 6.5]);
    }

    #[test]
    fn dense_forward_zero_weights_gives_bias() {
        let layer = DenseLayer {
            weights: Matrix::zeros(2, 3),
            bias: vec![1.0, -2.0],
        };
        assert_eq!(layer.forward(&[9.0, 8.0, 7.0]).unwrap(), vec![1.0, -2.0]);
    }

    #[test]
    fn dense_forward_identity() {
        let mut w = Matrix::zeros(3, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let layer = DenseLayer {
            weights: w,
            bias: vec![0.0; 3],
        };
        assert_eq!(
            layer.forward(&[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn dense_dimension_mismatch_error() {
        let layer = DenseLayer::zeros(2, 3);
        let err = layer.forward(&[1.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn dense_backward_bias_is_grad_out() {
        let layer = DenseLayer::zeros(2, 2);
        let g = layer.backward(&[1.0, 2.0], &[0.3, -0.7]).unwrap();
        assert_eq!(g.bias, vec![0.3, -0.7]);
    }

    #[test]
    fn dense_backward_zero_grad() {
        let layer = DenseLayer {
            weights: Matrix::from_rows(&[vec![1.0, -1.0]]),
            bias: vec![2.0],
        };
        let g = layer.backward(&[1.0, 2.0], &[0.0]).unwrap();
        assert!(g.weights.data.iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        // scalar loss = sum of outputs; central differences h = 1e-5
        let mut rng = substream(7, "dense-fd");
        for _ in 0..20 {
            let (out_d, in_d) = (3, 4);
            let layer = DenseLayer {
                weights: gaussian_matrix(out_d, in_d, 0.0, 1.0, &mut rng),
                bias: (0..out_d).map(|_| standard_normal(&mut rng)).collect(),
            };
            let x: Vec<f64> = (0..in_d).map(|_| standard_normal(&mut rng)).collect();
            let grad_out = vec![1.0; out_d];
            let g = layer.backward(&x, &grad_out).unwrap();

            let h = 1e-5;
            let loss = |l: &DenseLayer, x: &[f64]| -> f64 { l.forward(x).unwrap().iter().sum() };
            for idx in 0..layer.weights.data.len() {
                let mut lp = layer.clone();
                lp.weights.data[idx] += h;
                let mut lm = layer.clone();
                lm.weights.data[idx] -= h;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
                let analytic = g.weights.data[idx];
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (fd - analytic).abs() / denom < 1e-6,
                    "weight {idx}: fd={fd} analytic={analytic}"
                );
            }
            for i in 0..in_d {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
                let denom = fd.abs().max(g.input[i].abs()).max(1e-8);
                assert!((fd - g.input[i]).abs() / denom < 1e-6);
            }
        }
    }

    #[test]
    fn gaussian_matrix_deterministic() {
        let a = gaussian_matrix(10, 10, 0.0, 0.01, &mut substream(3, "g"));
        let b = gaussian_matrix(10, 10, 0.0, 0.01, &mut substream(3, "g"));
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_matrix_zero_stddev() {
        let m = gaussian_matrix(4, 4, 1.5, 0.0, &mut substream(1, "g"));
        assert!(m.data.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn gaussian_matrix_moments() {
        let m = gaussian_matrix(100, 100, 0.0, 0.01, &mut substream(11, "moments"));
        let n = m.data.len() as f64;
        let mean: f64 = m.data.iter().sum::<f64>() / n;
        let var: f64 = m.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 5.0 * 0.01 / n.sqrt(), "mean={mean}");
        let sd = var.sqrt();
        assert!((0.0085..=0.0115).contains(&sd), "sd={sd}");
    }

    #[test]
    fn substreams_differ_by_label() {
        let a = gaussian_matrix(2, 2, 0.0, 1.0, &mut substream(5, "a"));
        let b = gaussian_matrix(2, 2, 0.0, 1.0, &mut substream(5, "b"));
        assert_ne!(a, b);
    }
}
