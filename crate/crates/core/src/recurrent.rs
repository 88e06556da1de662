//! LSTM and GRU sequence classifiers with a dense softmax head, forward
//! pass and full backpropagation through time.
//!
//! Reference shapes: LSTM with one hidden layer of 256 units, GRU with
//! two stacked layers of 128 units, both with a 14-way output head. The
//! implementations are size-generic so gradient checks can run at desk
//! scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, substream, uniform_matrix, DenseLayer, Matrix};

/// Hidden (and for LSTM, cell) state per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
}

impl RecurrentState {
    pub fn zeros_lstm(hidden_size: usize) -> Self {
        RecurrentState {
            hidden: vec![vec![0.0; hidden_size]],
            cell: vec![vec![0.0; hidden_size]],
        }
    }

    pub fn zeros_gru(hidden_sizes: &[usize]) -> Self {
        RecurrentState {
            hidden: hidden_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            cell: Vec::new(),
        }
    }
}

/// Gate order for LSTM weight arrays: input, forget, output, candidate.
const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];
/// Gate order for GRU weight arrays: update, reset, candidate.
const GRU_GATES: [&str; 3] = ["z", "r", "h"];

/// Single-hidden-layer LSTM with a dense output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Input weights per gate (hidden × input), order i, f, o, g.
    pub wx: Vec<Matrix>,
    /// Recurrent weights per gate (hidden × hidden).
    pub wh: Vec<Matrix>,
    /// Biases per gate.
    pub b: Vec<Vec<f64>>,
    pub head: DenseLayer,
}

impl LstmParams {
    /// Seeded init: uniform [−k, k] with k = 1/√hidden, forget-gate bias 1.
    pub fn init(input_size: usize, hidden_size: usize, head_size: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "lstm-init");
        let k = 1.0 / (hidden_size as f64).sqrt();
        let wx = (0..4)
            .map(|_| uniform_matrix(hidden_size, input_size, k, &mut rng))
            .collect();
        let wh = (0..4)
            .map(|_| uniform_matrix(hidden_size, hidden_size, k, &mut rng))
            .collect();
        let mut b = vec![vec![0.0; hidden_size]; 4];
        b[1] = vec![1.0; hidden_size]; // forget gate
        let head = DenseLayer {
            weights: uniform_matrix(head_size, hidden_size, k, &mut rng),
            bias: vec![0.0; head_size],
        };
        LstmParams {
            input_size,
            hidden_size,
            wx,
            wh,
            b,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams {
            input_size: self.input_size,
            hidden_size: self.hidden_size,
            wx: self
                .wx
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
            wh: self
                .wh
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
            b: self.b.iter().map(|v| vec![0.0; v.len()]).collect(),
            head: DenseLayer::zeros(self.head.out_dim(), self.head.in_dim()),
        }
    }

    /// One cell step: i,f,o = σ(Wx + Uh + b), g = tanh(Wx + Uh + b),
    /// c' = f⊙c + i⊙g, h' = o⊙tanh(c').
    pub fn cell(&self, x: &[f64], state: &RecurrentState) -> Result<RecurrentState> {
        if x.len() != self.input_size {
            return Err(Error::shape("lstm_cell input", self.input_size, x.len()));
        }
        let h_prev = &state.hidden[0];
        let c_prev = &state.cell[0];
        let (gates, c, _tanh_c, h) = self.cell_inner(x, h_prev, c_prev);
        let _ = gates;
        Ok(RecurrentState {
            hidden: vec![h],
            cell: vec![c],
        })
    }

    fn cell_inner(
        &self,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> ([Vec<f64>; 4], Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.hidden_size;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(4);
        for gate in 0..4 {
            let mut a = self.wx[gate].matvec(x);
            let rec = self.wh[gate].matvec(h_prev);
            for j in 0..n {
                a[j] += rec[j] + self.b[gate][j];
            }
            for v in a.iter_mut() {
                *v = if gate == 3 {
                    v.tanh()
                } else {
                    sigmoid_scalar(*v)
                };
            }
            acts.push(a);
        }
        let g = acts.pop().unwrap();
        let o = acts.pop().unwrap();
        let f = acts.pop().unwrap();
        let i = acts.pop().unwrap();
        let mut c = vec![0.0; n];
        let mut tanh_c = vec![0.0; n];
        let mut h = vec![0.0; n];
        for j in 0..n {
            c[j] = f[j] * c_prev[j] + i[j] * g[j];
            tanh_c[j] = c[j].tanh();
            h[j] = o[j] * tanh_c[j];
        }
        ([i, f, o, g], c, tanh_c, h)
    }
}

/// One stacked GRU layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    /// Input weights per gate (hidden × input), order z, r, h̃.
    pub wx: Vec<Matrix>,
    pub wh: Vec<Matrix>,
    pub b: Vec<Vec<f64>>,
}

impl GruLayer {
    pub fn hidden_size(&self) -> usize {
        self.wx[0].rows
    }

    pub fn input_size(&self) -> usize {
        self.wx[0].cols
    }

    /// One step: z = σ(·), r = σ(·), h̃ = tanh(Wx + U(r⊙h) + b),
    /// h' = (1−z)⊙h + z⊙h̃.
    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_size() {
            return Err(Error::shape("gru_cell input", self.input_size(), x.len()));
        }
        let (_, _, _, _, h) = self.step_inner(x, h_prev);
        Ok(h)
    }

    #[allow(clippy::type_complexity)]
    fn step_inner(
        &self,
        x: &[f64],
        h_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.hidden_size();
        let gate = |idx: usize, extra: &[f64]| -> Vec<f64> {
            let mut a = self.wx[idx].matvec(x);
            let rec = self.wh[idx].matvec(extra);
            for j in 0..n {
                a[j] += rec[j] + self.b[idx][j];
            }
            a
        };
        let mut z = gate(0, h_prev);
        let mut r = gate(1, h_prev);
        for v in z.iter_mut() {
            *v = sigmoid_scalar(*v);
        }
        for v in r.iter_mut() {
            *v = sigmoid_scalar(*v);
        }
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
        let mut cand = gate(2, &rh);
        for v in cand.iter_mut() {
            *v = v.tanh();
        }
        let h: Vec<f64> = (0..n)
            .map(|j| (1.0 - z[j]) * h_prev[j] + z[j] * cand[j])
            .collect();
        (z, r, rh, cand, h)
    }
}

/// Stacked GRU with a dense output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub input_size: usize,
    pub hidden_sizes: Vec<usize>,
    pub layers: Vec<GruLayer>,
    pub head: DenseLayer,
}

impl GruParams {
    pub fn init(input_size: usize, hidden_sizes: &[usize], head_size: usize, seed: u64) -> Self {
        assert!(!hidden_sizes.is_empty());
        let mut rng = substream(seed, "gru-init");
        let mut layers = Vec::with_capacity(hidden_sizes.len());
        let mut in_dim = input_size;
        for &n in hidden_sizes {
            let k = 1.0 / (n as f64).sqrt();
            layers.push(GruLayer {
                wx: (0..3)
                    .map(|_| uniform_matrix(n, in_dim, k, &mut rng))
                    .collect(),
                wh: (0..3).map(|_| uniform_matrix(n, n, k, &mut rng)).collect(),
                b: vec![vec![0.0; n]; 3],
            });
            in_dim = n;
        }
        let k = 1.0 / (in_dim as f64).sqrt();
        let head = DenseLayer {
            weights: uniform_matrix(head_size, in_dim, k, &mut rng),
            bias: vec![0.0; head_size],
        };
        GruParams {
            input_size,
            hidden_sizes: hidden_sizes.to_vec(),
            layers,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        GruParams {
            input_size: self.input_size,
            hidden_sizes: self.hidden_sizes.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| GruLayer {
                    wx: l.wx.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect(),
                    wh: l.wh.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect(),
                    b: l.b.iter().map(|v| vec![0.0; v.len()]).collect(),
                })
                .collect(),
            head: DenseLayer::zeros(self.head.out_dim(), self.head.in_dim()),
        }
    }
}

/// Either recurrent architecture behind one training/inference API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RecurrentParams {
    Lstm(LstmParams),
    Gru(GruParams),
}

/// Intermediate activations retained by [`RecurrentParams::forward_sequence`]
/// for backpropagation through time. Not shareable across sequences.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    /// Inputs per layer per timestep; layer 0 holds the network inputs.
    layer_inputs: Vec<Vec<Vec<f64>>>,
    /// Hidden states per layer, index 0 is the initial (zero) state.
    hidden: Vec<Vec<Vec<f64>>>,
    /// LSTM only: cell states (index 0 initial) and gate/tanh caches.
    cell: Vec<Vec<f64>>,
    lstm_gates: Vec<[Vec<f64>; 4]>,
    lstm_tanh_c: Vec<Vec<f64>>,
    /// GRU only: per layer per step (z, r, r⊙h, h̃).
    gru_gates: Vec<Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>>,
    per_step: bool,
    len: usize,
    arch_tag: &'static str,
    input_size: usize,
}

impl RecurrentParams {
    pub fn input_size(&self) -> usize {
        match self {
            RecurrentParams::Lstm(p) => p.input_size,
            RecurrentParams::Gru(p) => p.input_size,
        }
    }

    pub fn head_size(&self) -> usize {
        match self {
            RecurrentParams::Lstm(p) => p.head.out_dim(),
            RecurrentParams::Gru(p) => p.head.out_dim(),
        }
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        match self {
            RecurrentParams::Lstm(p) => vec![p.hidden_size],
            RecurrentParams::Gru(p) => p.hidden_sizes.clone(),
        }
    }

    pub fn architecture(&self) -> &'static str {
        match self {
            RecurrentParams::Lstm(_) => "lstm",
            RecurrentParams::Gru(_) => "gru",
        }
    }

    pub fn zero_state(&self) -> RecurrentState {
        match self {
            RecurrentParams::Lstm(p) => RecurrentState::zeros_lstm(p.hidden_size),
            RecurrentParams::Gru(p) => RecurrentState::zeros_gru(&p.hidden_sizes),
        }
    }

    /// One step through all layers with threaded state (no head applied).
    pub fn step(&self, x: &[f64], state: &RecurrentState) -> Result<RecurrentState> {
        match self {
            RecurrentParams::Lstm(p) => p.cell(x, state),
            RecurrentParams::Gru(p) => {
                let mut hidden = Vec::with_capacity(p.layers.len());
                let mut input = x.to_vec();
                for (l, layer) in p.layers.iter().enumerate() {
                    let h = layer.step(&input, &state.hidden[l])?;
                    input = h.clone();
                    hidden.push(h);
                }
                Ok(RecurrentState {
                    hidden,
                    cell: Vec::new(),
                })
            }
        }
    }

    /// Runs the sequence from a zero initial state. With `per_step` one
    /// logit vector per timestep is produced; otherwise a single logit
    /// vector from the final hidden state.
    pub fn forward_sequence(
        &self,
        inputs: &[Vec<f64>],
        per_step: bool,
    ) -> Result<(Vec<Vec<f64>>, SequenceCache)> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("forward_sequence on empty sequence"));
        }
        for x in inputs {
            if x.len() != self.input_size() {
                return Err(Error::shape(
                    "forward_sequence input",
                    self.input_size(),
                    x.len(),
                ));
            }
        }
        let t_len = inputs.len();
        match self {
            RecurrentParams::Lstm(p) => {
                let mut cache = SequenceCache {
                    layer_inputs: vec![inputs.to_vec()],
                    hidden: vec![vec![vec![0.0; p.hidden_size]]],
                    cell: vec![vec![0.0; p.hidden_size]],
                    lstm_gates: Vec::with_capacity(t_len),
                    lstm_tanh_c: Vec::with_capacity(t_len),
                    gru_gates: Vec::new(),
                    per_step,
                    len: t_len,
                    arch_tag: "lstm",
                    input_size: p.input_size,
                };
                for x in inputs {
                    let h_prev = cache.hidden[0].last().unwrap().clone();
                    let c_prev = cache.cell.last().unwrap().clone();
                    let (gates, c, tanh_c, h) = p.cell_inner(x, &h_prev, &c_prev);
                    cache.lstm_gates.push(gates);
                    cache.lstm_tanh_c.push(tanh_c);
                    cache.cell.push(c);
                    cache.hidden[0].push(h);
                }
                let logits = self.head_logits(p.head.clone(), &cache.hidden[0], per_step)?;
                Ok((logits, cache))
            }
            RecurrentParams::Gru(p) => {
                let n_layers = p.layers.len();
                let mut cache = SequenceCache {
                    layer_inputs: vec![Vec::new(); n_layers],
                    hidden: p.hidden_sizes.iter().map(|&n| vec![vec![0.0; n]]).collect(),
                    cell: Vec::new(),
                    lstm_gates: Vec::new(),
                    lstm_tanh_c: Vec::new(),
                    gru_gates: vec![Vec::with_capacity(t_len); n_layers],
                    per_step,
                    len: t_len,
                    arch_tag: "gru",
                    input_size: p.input_size,
                };
                cache.layer_inputs[0] = inputs.to_vec();
                for t in 0..t_len {
                    let mut input = cache.layer_inputs[0][t].clone();
                    for (l, layer) in p.layers.iter().enumerate() {
                        if l > 0 {
                            cache.layer_inputs[l].push(input.clone());
                        }
                        let h_prev = cache.hidden[l].last().unwrap().clone();
                        let (z, r, rh, cand, h) = layer.step_inner(&input, &h_prev);
                        cache.gru_gates[l].push((z, r, rh, cand));
                        cache.hidden[l].push(h.clone());
                        input = h;
                    }
                }
                let top = cache.hidden[n_layers - 1].clone();
                let logits = self.head_logits(p.head.clone(), &top, per_step)?;
                Ok((logits, cache))
            }
        }
    }

    fn head_logits(
        &self,
        head: DenseLayer,
        hidden: &[Vec<f64>],
        per_step: bool,
    ) -> Result<Vec<Vec<f64>>> {
        if per_step {
            hidden[1..].iter().map(|h| head.forward(h)).collect()
        } else {
            Ok(vec![head.forward(hidden.last().unwrap())?])
        }
    }

    /// Accumulates gradients for every parameter across timesteps.
    /// `grad_logits` must have one entry per emitted logit vector.
    pub fn backward_sequence(
        &self,
        cache: &SequenceCache,
        grad_logits: &[Vec<f64>],
    ) -> Result<RecurrentParams> {
        if cache.arch_tag != self.architecture() || cache.input_size != self.input_size() {
            return Err(Error::InvalidInput(
                "cache does not match these parameters".into(),
            ));
        }
        let expected = if cache.per_step { cache.len } else { 1 };
        if grad_logits.len() != expected {
            return Err(Error::shape(
                "backward_sequence grads",
                expected,
                grad_logits.len(),
            ));
        }
        match self {
            RecurrentParams::Lstm(p) => Ok(RecurrentParams::Lstm(p.backward(cache, grad_logits)?)),
            RecurrentParams::Gru(p) => Ok(RecurrentParams::Gru(p.backward(cache, grad_logits)?)),
        }
    }

    /// Flattened view of all parameters, in checkpoint tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_tensors(|_, _, _, data| out.extend_from_slice(data));
        out
    }

    pub fn flat_len(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(|_, _, _, data| n += data.len());
        n
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::shape("copy_from_flat", self.flat_len(), flat.len()));
        }
        let mut offset = 0;
        self.visit_tensors_mut(|_, _, _, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        Ok(())
    }

    /// Calls `f(name, rows, cols, data)` for every parameter tensor in a
    /// fixed order (biases have cols = 1).
    pub fn visit_tensors<F: FnMut(String, usize, usize, &[f64])>(&self, mut f: F) {
        match self {
            RecurrentParams::Lstm(p) => {
                for (g, name) in LSTM_GATES.iter().enumerate() {
                    f(
                        format!("lstm.wx_{name}"),
                        p.wx[g].rows,
                        p.wx[g].cols,
                        &p.wx[g].data,
                    );
                }
                for (g, name) in LSTM_GATES.iter().enumerate() {
                    f(
                        format!("lstm.wh_{name}"),
                        p.wh[g].rows,
                        p.wh[g].cols,
                        &p.wh[g].data,
                    );
                }
                for (g, name) in LSTM_GATES.iter().enumerate() {
                    f(format!("lstm.b_{name}"), p.b[g].len(), 1, &p.b[g]);
                }
                f(
                    "head.weights".into(),
                    p.head.weights.rows,
                    p.head.weights.cols,
                    &p.head.weights.data,
                );
                f("head.bias".into(), p.head.bias.len(), 1, &p.head.bias);
            }
            RecurrentParams::Gru(p) => {
                for (l, layer) in p.layers.iter().enumerate() {
                    for (g, name) in GRU_GATES.iter().enumerate() {
                        f(
                            format!("gru.{l}.wx_{name}"),
                            layer.wx[g].rows,
                            layer.wx[g].cols,
                            &layer.wx[g].data,
                        );
                    }
                    for (g, name) in GRU_GATES.iter().enumerate() {
                        f(
                            format!("gru.{l}.wh_{name}"),
                            layer.wh[g].rows,
                            layer.wh[g].cols,
                            &layer.wh[g].data,
                        );
                    }
                    for (g, name) in GRU_GATES.iter().enumerate() {
                        f(
                            format!("gru.{l}.b_{name}"),
                            layer.b[g].len(),
                            1,
                            &layer.b[g],
                        );
                    }
                }
                f(
                    "head.weights".into(),
                    p.head.weights.rows,
                    p.head.weights.cols,
                    &p.head.weights.data,
                );
                f("head.bias".into(), p.head.bias.len(), 1, &p.head.bias);
            }
        }
    }

    pub fn visit_tensors_mut<F: FnMut(String, usize, usize, &mut [f64])>(&mut self, mut f: F) {
        match self {
            RecurrentParams::Lstm(p) => {
                for (g, name) in LSTM_GATES.iter().enumerate() {
                    let m = &mut p.wx[g];
                    f(format!("lstm.wx_{name}"), m.rows, m.cols, &mut m.data);
                }
                for (g, name) in LSTM_GATES.iter().enumerate() {
                    let m = &mut p.wh[g];
                    f(format!("lstm.wh_{name}"), m.rows, m.cols, &mut m.data);
                }
                for (g, name) in LSTM_GATES.iter().enumerate() {
                    let n = p.b[g].len();
                    f(format!("lstm.b_{name}"), n, 1, &mut p.b[g]);
                }
                let w = &mut p.head.weights;
                f("head.weights".into(), w.rows, w.cols, &mut w.data);
                let n = p.head.bias.len();
                f("head.bias".into(), n, 1, &mut p.head.bias);
            }
            RecurrentParams::Gru(p) => {
                for (l, layer) in p.layers.iter_mut().enumerate() {
                    for (g, name) in GRU_GATES.iter().enumerate() {
                        let m = &mut layer.wx[g];
                        f(format!("gru.{l}.wx_{name}"), m.rows, m.cols, &mut m.data);
                    }
                    for (g, name) in GRU_GATES.iter().enumerate() {
                        let m = &mut layer.wh[g];
                        f(format!("gru.{l}.wh_{name}"), m.rows, m.cols, &mut m.data);
                    }
                    for (g, name) in GRU_GATES.iter().enumerate() {
                        let n = layer.b[g].len();
                        f(format!("gru.{l}.b_{name}"), n, 1, &mut layer.b[g]);
                    }
                }
                let w = &mut p.head.weights;
                f("head.weights".into(), w.rows, w.cols, &mut w.data);
                let n = p.head.bias.len();
                f("head.bias".into(), n, 1, &mut p.head.bias);
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl LstmParams {
    fn backward(&self, cache: &SequenceCache, grad_logits: &[Vec<f64>]) -> Result<LstmParams> {
        let n = self.hidden_size;
        let t_len = cache.len;
        let mut grads = self.zeros_like();
        let mut dh_carry = vec![0.0; n];
        let mut dc_carry = vec![0.0; n];
        for t in (0..t_len).rev() {
            let h_t = &cache.hidden[0][t + 1];
            let mut dh = dh_carry.clone();
            let head_grad = if cache.per_step {
                Some(&grad_logits[t])
            } else if t == t_len - 1 {
                Some(&grad_logits[0])
            } else {
                None
            };
            if let Some(gl) = head_grad {
                let hg = self.head.backward(h_t, gl)?;
                add_assign(&mut grads.head.weights.data, &hg.weights.data);
                add_assign(&mut grads.head.bias, &hg.bias);
                add_assign(&mut dh, &hg.input);
            }
            let [i, fgate, o, g] = &cache.lstm_gates[t];
            let tanh_c = &cache.lstm_tanh_c[t];
            let c_prev = &cache.cell[t];
            let h_prev = &cache.hidden[0][t];
            let x_t = &cache.layer_inputs[0][t];
            // through h = o ⊙ tanh(c)
            let mut da = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            let mut dc_prev = vec![0.0; n];
            for j in 0..n {
                let d_o = dh[j] * tanh_c[j];
                let dc = dc_carry[j] + dh[j] * o[j] * (1.0 - tanh_c[j] * tanh_c[j]);
                let d_i = dc * g[j];
                let d_g = dc * i[j];
                let d_f = dc * c_prev[j];
                dc_prev[j] = dc * fgate[j];
                da[0][j] = d_i * i[j] * (1.0 - i[j]);
                da[1][j] = d_f * fgate[j] * (1.0 - fgate[j]);
                da[2][j] = d_o * o[j] * (1.0 - o[j]);
                da[3][j] = d_g * (1.0 - g[j] * g[j]);
            }
            let mut dh_prev = vec![0.0; n];
            for gate in 0..4 {
                grads.wx[gate].add_outer(&da[gate], x_t);
                grads.wh[gate].add_outer(&da[gate], h_prev);
                add_assign(&mut grads.b[gate], &da[gate]);
                add_assign(&mut dh_prev, &self.wh[gate].matvec_transpose(&da[gate]));
            }
            dh_carry = dh_prev;
            dc_carry = dc_prev;
        }
        Ok(grads)
    }
}

impl GruParams {
    fn backward(&self, cache: &SequenceCache, grad_logits: &[Vec<f64>]) -> Result<GruParams> {
        let t_len = cache.len;
        let n_layers = self.layers.len();
        let mut grads = self.zeros_like();
        let mut dh_carry: Vec<Vec<f64>> = self.hidden_sizes.iter().map(|&n| vec![0.0; n]).collect();
        for t in (0..t_len).rev() {
            let top_h = &cache.hidden[n_layers - 1][t + 1];
            let mut dh_from_above = vec![0.0; self.hidden_sizes[n_layers - 1]];
            let head_grad = if cache.per_step {
                Some(&grad_logits[t])
            } else if t == t_len - 1 {
                Some(&grad_logits[0])
            } else {
                None
            };
            if let Some(gl) = head_grad {
                let hg = self.head.backward(top_h, gl)?;
                add_assign(&mut grads.head.weights.data, &hg.weights.data);
                add_assign(&mut grads.head.bias, &hg.bias);
                add_assign(&mut dh_from_above, &hg.input);
            }
            for l in (0..n_layers).rev() {
                let n = self.hidden_sizes[l];
                let layer = &self.layers[l];
                let glayer = &mut grads.layers[l];
                let (z, r, rh, cand) = &cache.gru_gates[l][t];
                let h_prev = &cache.hidden[l][t];
                let x_t = &cache.layer_inputs[l][t];
                let mut dh = dh_from_above;
                add_assign(&mut dh, &dh_carry[l]);
                // h' = (1−z)⊙h_prev + z⊙h̃
                let mut da_z = vec![0.0; n];
                let mut da_h = vec![0.0; n];
                let mut dh_prev = vec![0.0; n];
                for j in 0..n {
                    let dz = dh[j] * (cand[j] - h_prev[j]);
                    let dcand = dh[j] * z[j];
                    dh_prev[j] = dh[j] * (1.0 - z[j]);
                    da_z[j] = dz * z[j] * (1.0 - z[j]);
                    da_h[j] = dcand * (1.0 - cand[j] * cand[j]);
                }
                let d_rh = layer.wh[2].matvec_transpose(&da_h);
                let mut da_r = vec![0.0; n];
                for j in 0..n {
                    da_r[j] = d_rh[j] * h_prev[j] * r[j] * (1.0 - r[j]);
                    dh_prev[j] += d_rh[j] * r[j];
                }
                glayer.wx[0].add_outer(&da_z, x_t);
                glayer.wx[1].add_outer(&da_r, x_t);
                glayer.wx[2].add_outer(&da_h, x_t);
                glayer.wh[0].add_outer(&da_z, h_prev);
                glayer.wh[1].add_outer(&da_r, h_prev);
                glayer.wh[2].add_outer(&da_h, rh);
                add_assign(&mut glayer.b[0], &da_z);
                add_assign(&mut glayer.b[1], &da_r);
                add_assign(&mut glayer.b[2], &da_h);
                add_assign(&mut dh_prev, &layer.wh[0].matvec_transpose(&da_z));
                add_assign(&mut dh_prev, &layer.wh[1].matvec_transpose(&da_r));
                let mut dx = layer.wx[0].matvec_transpose(&da_z);
                add_assign(&mut dx, &layer.wx[1].matvec_transpose(&da_r));
                add_assign(&mut dx, &layer.wx[2].matvec_transpose(&da_h));
                dh_carry[l] = dh_prev;
                dh_from_above = dx;
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{softmax_ce, MultiClassBatch};

    fn constant_lstm(hidden: usize, input: usize, value: f64) -> LstmParams {
        let mut p = LstmParams::init(input, hidden, 14, 0).zeros_like();
        for m in p.wx.iter_mut().chain(p.wh.iter_mut()) {
            m.data.iter_mut().for_each(|v| *v = value);
        }
        p
    }

    #[test]
    fn lstm_cell_all_zero_stays_zero() {
        let p = constant_lstm(3, 2, 0.0);
        let state = RecurrentState::zeros_lstm(3);
        let next = p.cell(&[0.0, 0.0], &state).unwrap();
        assert!(next.hidden[0].iter().all(|&v| v == 0.0));
        assert!(next.cell[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_cell_scalar_hand_value() {
        // hidden 1, all weights 0.5, biases 0, x = [1], zero state
        let p = constant_lstm(1, 1, 0.5);
        let next = p.cell(&[1.0], &RecurrentState::zeros_lstm(1)).unwrap();
        let s = sigmoid_scalar(0.5);
        let c1 = s * 0.5f64.tanh();
        let h1 = s * c1.tanh();
        assert!((next.cell[0][0] - c1).abs() < 1e-15);
        assert!((next.hidden[0][0] - h1).abs() < 1e-15);
        // c1 = σ(0.5)·tanh(0.5), h1 = σ(0.5)·tanh(c1)
        assert!((c1 - 0.2877).abs() < 1e-4);
        assert!((h1 - 0.1743).abs() < 1e-4);
    }

    #[test]
    fn lstm_hidden_magnitude_below_one() {
        use rand::Rng;
        let p = LstmParams::init(4, 6, 14, 3);
        let mut rng = substream(4, "lstm-mag");
        let mut state = RecurrentState::zeros_lstm(6);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            state = p.cell(&x, &state).unwrap();
            assert!(state.hidden[0].iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let p = GruParams::init(2, &[3], 14, 0);
        let zero = GruLayer {
            wx: p.layers[0]
                .wx
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
            wh: p.layers[0]
                .wh
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
            b: vec![vec![0.0; 3]; 3],
        };
        let h = zero.step(&[1.0, -1.0], &[0.4, -0.8, 0.2]).unwrap();
        assert_eq!(h, vec![0.2, -0.4, 0.1]);
    }

    #[test]
    fn gru_scalar_hand_value() {
        // hidden 1, all weights 0.5, biases 0, x = [1], h_prev = [0]
        let layer = GruLayer {
            wx: (0..3).map(|_| Matrix::from_rows(&[vec![0.5]])).collect(),
            wh: (0..3).map(|_| Matrix::from_rows(&[vec![0.5]])).collect(),
            b: vec![vec![0.0]; 3],
        };
        let h = layer.step(&[1.0], &[0.0]).unwrap();
        let z = sigmoid_scalar(0.5);
        let cand = 0.5f64.tanh();
        let expected = z * cand;
        assert!((h[0] - expected).abs() < 1e-15);
        assert!((h[0] - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn gru_state_stays_in_unit_interval() {
        use rand::Rng;
        let p = GruParams::init(3, &[4, 4], 14, 9);
        let mut rng = substream(10, "gru-range");
        let mut state = RecurrentState::zeros_gru(&[4, 4]);
        let model = RecurrentParams::Gru(p);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            state = model.step(&x, &state).unwrap();
            for layer in &state.hidden {
                assert!(layer.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn forward_length_one_equals_single_step_plus_head() {
        let model = RecurrentParams::Lstm(LstmParams::init(3, 5, 14, 7));
        let x = vec![0.3, -0.4, 1.2];
        let (logits, _) = model.forward_sequence(std::slice::from_ref(&x), true).unwrap();
        let state = model.step(&x, &model.zero_state()).unwrap();
        let head = match &model {
            RecurrentParams::Lstm(p) => &p.head,
            _ => unreachable!(),
        };
        let direct = head.forward(&state.hidden[0]).unwrap();
        assert_eq!(logits[0], direct);
    }

    #[test]
    fn forward_equals_stepwise_state_threading() {
        use rand::Rng;
        for model in [
            RecurrentParams::Lstm(LstmParams::init(4, 6, 14, 2)),
            RecurrentParams::Gru(GruParams::init(4, &[5, 3], 14, 2)),
        ] {
            let mut rng = substream(11, "thread");
            let inputs: Vec<Vec<f64>> = (0..12)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let (_, cache) = model.forward_sequence(&inputs, true).unwrap();
            let mut state = model.zero_state();
            for (t, x) in inputs.iter().enumerate() {
                state = model.step(x, &state).unwrap();
                let top = state.hidden.last().unwrap();
                let cached = cache.hidden.last().unwrap()[t + 1].clone();
                for (a, b) in top.iter().zip(&cached) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn forward_zero_head_gives_uniform_softmax() {
        let mut p = LstmParams::init(2, 3, 14, 1);
        p.head = DenseLayer::zeros(14, 3);
        let model = RecurrentParams::Lstm(p);
        let (logits, _) = model.forward_sequence(&[vec![1.0, 2.0]], true).unwrap();
        assert!(logits[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_deterministic() {
        let model = RecurrentParams::Gru(GruParams::init(21, &[8, 8], 14, 5));
        use rand::Rng;
        let inputs: Vec<Vec<f64>> = {
            let mut rng = substream(6, "det");
            (0..100)
                .map(|_| {
                    (0..21)
                        .map(|_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect()
        };
        let (a, _) = model.forward_sequence(&inputs, true).unwrap();
        let (b, _) = model.forward_sequence(&inputs, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_sequence_errors() {
        let model = RecurrentParams::Lstm(LstmParams::init(2, 3, 14, 1));
        assert!(model.forward_sequence(&[], true).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_param_gradients() {
        let model = RecurrentParams::Lstm(LstmParams::init(2, 3, 14, 1));
        let inputs = vec![vec![1.0, -1.0]; 4];
        let (_, cache) = model.forward_sequence(&inputs, true).unwrap();
        let zeros = vec![vec![0.0; 14]; 4];
        let grads = model.backward_sequence(&cache, &zeros).unwrap();
        assert!(grads.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_scale_shapes_run() {
        use rand::Rng;
        let mut rng = substream(8, "reference-scale");
        for model in [
            RecurrentParams::Lstm(LstmParams::init(21, 256, 14, 0)),
            RecurrentParams::Lstm(LstmParams::init(2048, 256, 14, 0)),
            RecurrentParams::Gru(GruParams::init(21, &[128, 128], 14, 0)),
        ] {
            let d = model.input_size();
            let inputs: Vec<Vec<f64>> = (0..100)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let (logits, _) = model.forward_sequence(&inputs, true).unwrap();
            assert_eq!(logits.len(), 100);
            assert_eq!(logits[0].len(), 14);
        }
    }

    /// Loss for gradient checks: softmax_ce over the stacked per-step
    /// logits with fixed labels.
    fn sequence_loss(model: &RecurrentParams, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let (logits, _) = model.forward_sequence(inputs, true).unwrap();
        let rows: Vec<Vec<f64>> = logits;
        let batch =
            MultiClassBatch::from_indices(labels, model.head_size(), Matrix::from_rows(&rows))
                .unwrap();
        softmax_ce(&batch).unwrap().0
    }

    fn check_bptt_against_finite_differences(model: RecurrentParams, seq_len: usize, seed: u64) {
        use rand::Rng;
        let mut rng = substream(seed, "bptt-fd");
        let d = model.input_size();
        let inputs: Vec<Vec<f64>> = (0..seq_len)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..seq_len)
            .map(|_| rng.gen_range(0..model.head_size()))
            .collect();
        let (logits, cache) = model.forward_sequence(&inputs, true).unwrap();
        let batch =
            MultiClassBatch::from_indices(&labels, model.head_size(), Matrix::from_rows(&logits))
                .unwrap();
        let (_, grad_logits) = softmax_ce(&batch).unwrap();
        let per_step: Vec<Vec<f64>> = (0..seq_len).map(|t| grad_logits.row(t).to_vec()).collect();
        let analytic = model
            .backward_sequence(&cache, &per_step)
            .unwrap()
            .to_flat();

        let flat = model.to_flat();
        // h chosen to balance truncation against roundoff for a loss of O(1)
        let h = 1e-4;
        let mut max_rel = 0.0f64;
        for idx in 0..flat.len() {
            let mut perturbed = model.clone();
            let mut fp = flat.clone();
            fp[idx] += h;
            perturbed.copy_from_flat(&fp).unwrap();
            let lp = sequence_loss(&perturbed, &inputs, &labels);
            fp[idx] -= 2.0 * h;
            perturbed.copy_from_flat(&fp).unwrap();
            let lm = sequence_loss(&perturbed, &inputs, &labels);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-7);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn lstm_bptt_matches_finite_differences() {
        for seed in 0..3 {
            check_bptt_against_finite_differences(
                RecurrentParams::Lstm(LstmParams::init(2, 3, 4, seed)),
                5,
                100 + seed,
            );
        }
    }

    #[test]
    fn gru_bptt_matches_finite_differences() {
        for seed in 0..3 {
            check_bptt_against_finite_differences(
                RecurrentParams::Gru(GruParams::init(2, &[3, 3], 4, seed)),
                4,
                200 + seed,
            );
        }
    }

    #[test]
    fn final_step_mode_bptt_matches_finite_differences() {
        use rand::Rng;
        let model = RecurrentParams::Lstm(LstmParams::init(2, 3, 4, 9));
        let mut rng = substream(33, "final-fd");
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let label = 2usize;
        let loss_of = |m: &RecurrentParams| -> f64 {
            let (logits, _) = m.forward_sequence(&inputs, false).unwrap();
            let batch =
                MultiClassBatch::from_indices(&[label], 4, Matrix::from_rows(&logits)).unwrap();
            softmax_ce(&batch).unwrap().0
        };
        let (logits, cache) = model.forward_sequence(&inputs, false).unwrap();
        assert_eq!(logits.len(), 1);
        let batch = MultiClassBatch::from_indices(&[label], 4, Matrix::from_rows(&logits)).unwrap();
        let (_, grad_logits) = softmax_ce(&batch).unwrap();
        let analytic = model
            .backward_sequence(&cache, &[grad_logits.row(0).to_vec()])
            .unwrap()
            .to_flat();
        let flat = model.to_flat();
        let h = 1e-5;
        for idx in (0..flat.len()).step_by(7) {
            let mut m = model.clone();
            let mut fp = flat.clone();
            fp[idx] += h;
            m.copy_from_flat(&fp).unwrap();
            let lp = loss_of(&m);
            fp[idx] -= 2.0 * h;
            m.copy_from_flat(&fp).unwrap();
            let lm = loss_of(&m);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-7);
            assert!(rel < 1e-5, "idx {idx} rel {rel}");
        }
    }

    #[test]
    fn cache_model_mismatch_errors() {
        let lstm = RecurrentParams::Lstm(LstmParams::init(2, 3, 4, 1));
        let gru = RecurrentParams::Gru(GruParams::init(2, &[3], 4, 1));
        let (_, cache) = lstm.forward_sequence(&[vec![0.1, 0.2]], true).unwrap();
        assert!(gru.backward_sequence(&cache, &[vec![0.0; 4]]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let model = RecurrentParams::Gru(GruParams::init(5, &[4, 3], 14, 13));
        let flat = model.to_flat();
        let mut copy = model.clone();
        copy.copy_from_flat(&flat).unwrap();
        assert_eq!(copy, model);
        assert_eq!(flat.len(), model.flat_len());
    }
}
