//! Minimal dense network with exact forward/backward passes.
//!
//! A [`Network`] is a rectifier MLP trunk followed by one of three head
//! layouts ([`HeadConfig`]). Forward and backward never mutate the network;
//! gradients come back as a separate [`Gradients`] value with the same shape
//! as the parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Work (multiply-adds) below which row loops stay on the calling thread.
const PAR_WORK_THRESHOLD: usize = 1 << 16;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::config(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Affine layer: `weight` is `out x in` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in +-sqrt(6/(in+out)), zero bias.
    pub fn init_uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Single-vector affine map `W x + b`.
pub fn affine_forward(x: &[f64], w: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    if w.len() != b.len() {
        return Err(Error::config(format!(
            "weight has {} rows but bias has {} entries",
            w.len(),
            b.len()
        )));
    }
    w.iter()
        .zip(b)
        .enumerate()
        .map(|(j, (row, bj))| {
            if row.len() != x.len() {
                return Err(Error::config(format!(
                    "weight row {j} has {} columns, input has {}",
                    row.len(),
                    x.len()
                )));
            }
            Ok(row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bj)
        })
        .collect()
}

/// Softmax via max subtraction. Empty input is a configuration error.
pub fn stable_softmax(z: &[f64]) -> Result<Vec<f64>> {
    Ok(ProbOutput::from_logits(z)?.probs)
}

/// Softmax probabilities together with the logits they came from.
///
/// `log_probs` is computed by log-sum-exp and stays finite even where
/// `probs` underflows to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ProbOutput {
    pub fn from_logits(z: &[f64]) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::config("softmax of an empty vector"));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::numeric("non-finite logit in softmax input"));
        }
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        let lse = max + sum.ln();
        let log_probs: Vec<f64> = z.iter().map(|v| v - lse).collect();
        let probs = e.iter().map(|v| v / sum).collect();
        Ok(ProbOutput {
            logits: z.to_vec(),
            probs,
            log_probs,
        })
    }

    /// Builds an output from a probability vector by taking `ln p` as logits.
    /// Zero entries are floored at 1e-300.
    pub fn from_probs(p: &[f64]) -> Result<Self> {
        let z: Vec<f64> = p.iter().map(|v| v.max(1e-300).ln()).collect();
        Self::from_logits(&z)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Output head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadConfig {
    /// C class logits.
    Plain,
    /// C class logits plus one abstain logit (index C).
    Abstain,
    /// Prediction logits f, sigmoid selection unit g, auxiliary logits h.
    Selectivenet,
}

impl HeadConfig {
    /// Output width of each head, in head order.
    pub fn head_dims(self, n_classes: usize) -> Vec<usize> {
        match self {
            HeadConfig::Plain => vec![n_classes],
            HeadConfig::Abstain => vec![n_classes + 1],
            HeadConfig::Selectivenet => vec![n_classes, 1, n_classes],
        }
    }
}

/// Head indices for the SelectiveNet layout. Other layouts only have [`HEAD_PRED`].
pub const HEAD_PRED: usize = 0;
pub const HEAD_SELECT: usize = 1;
pub const HEAD_AUX: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericMode {
    #[default]
    F64,
    /// Activations and parameters are rounded to single precision after
    /// every layer and every update.
    F32,
}

impl NumericMode {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            NumericMode::F64 => v,
            NumericMode::F32 => v as f32 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub head: HeadConfig,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be at least 2"));
        }
        if let Some(i) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::config(format!("hidden layer {i} has zero width")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub numeric_mode: NumericMode,
    pub trunk: Vec<Dense>,
    pub heads: Vec<Dense>,
}

/// Per-layer intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Trunk pre-activations, one per hidden layer.
    pub pre: Vec<Matrix>,
    /// Trunk activations, one per hidden layer.
    pub post: Vec<Matrix>,
    /// Raw head outputs, one per head.
    pub logits: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows
    }

    /// Sigmoid of the selection unit (SelectiveNet layout only).
    pub fn selection(&self) -> Option<Vec<f64>> {
        (self.logits.len() == 3).then(|| self.logits[HEAD_SELECT].data.iter().map(|&z| sigmoid(z)).collect())
    }

    fn features(&self) -> &Matrix {
        self.post.last().unwrap_or(&self.input)
    }
}

/// Parameter-shaped gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub trunk: Vec<Dense>,
    pub heads: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            trunk: net.trunk.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
            heads: net.heads.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(self.trunk.iter().chain(&self.heads))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(self.heads.iter())
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

fn flatten_layers<'a>(layers: impl Iterator<Item = &'a Dense>) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weight);
        out.extend_from_slice(&l.bias);
    }
    out
}

impl Network {
    /// Seeded fan-scaled uniform init.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(arch.hidden.len());
        let mut in_dim = arch.input_dim;
        for &h in &arch.hidden {
            trunk.push(Dense::init_uniform(in_dim, h, &mut rng));
            in_dim = h;
        }
        let heads = arch
            .head
            .head_dims(arch.n_classes)
            .into_iter()
            .map(|k| Dense::init_uniform(in_dim, k, &mut rng))
            .collect();
        Ok(Network {
            arch,
            numeric_mode: NumericMode::F64,
            trunk,
            heads,
        })
    }

    /// All parameters zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let mut net = Network::new(arch, 0)?;
        for l in net.layers_mut() {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(net)
    }

    /// Assemble from explicit layers, checking that dimensions chain.
    pub fn from_layers(arch: Architecture, trunk: Vec<Dense>, heads: Vec<Dense>) -> Result<Self> {
        arch.validate()?;
        let net = Network {
            arch,
            numeric_mode: NumericMode::F64,
            trunk,
            heads,
        };
        net.check_shapes()?;
        Ok(net)
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.trunk.len() != self.arch.hidden.len() {
            return Err(Error::config("trunk depth does not match architecture"));
        }
        let mut in_dim = self.arch.input_dim;
        for (i, (l, &h)) in self.trunk.iter().zip(&self.arch.hidden).enumerate() {
            if l.in_dim != in_dim || l.out_dim != h {
                return Err(Error::config(format!("trunk layer {i} has wrong dimensions")));
            }
            in_dim = h;
        }
        let dims = self.arch.head.head_dims(self.arch.n_classes);
        if dims.len() != self.heads.len() {
            return Err(Error::config("head count does not match head_config"));
        }
        for (i, (l, &k)) in self.heads.iter().zip(&dims).enumerate() {
            if l.in_dim != in_dim || l.out_dim != k {
                return Err(Error::config(format!("head {i} has wrong dimensions")));
            }
        }
        for l in self.layers() {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::config("layer storage does not match its dimensions"));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    pub fn head_config(&self) -> HeadConfig {
        self.arch.head
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(self.heads.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten_layers(self.layers())
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        self.forward_with(batch, Exec::default())
    }

    pub fn forward_with(&self, batch: &Matrix, exec: Exec) -> Result<ForwardTrace> {
        if batch.cols != self.arch.input_dim {
            return Err(Error::config(format!(
                "batch has {} features, network expects {}",
                batch.cols, self.arch.input_dim
            )));
        }
        let mode = self.numeric_mode;
        let mut pre = Vec::with_capacity(self.trunk.len());
        let mut post = Vec::with_capacity(self.trunk.len());
        for (li, layer) in self.trunk.iter().enumerate() {
            let input = post.last().unwrap_or(batch);
            let z = affine_batch(input, layer, mode, exec);
            check_finite(&z, li)?;
            let a = Matrix {
                rows: z.rows,
                cols: z.cols,
                data: z.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            };
            pre.push(z);
            post.push(a);
        }
        let features = post.last().unwrap_or(batch);
        let mut logits = Vec::with_capacity(self.heads.len());
        for (hi, head) in self.heads.iter().enumerate() {
            let z = affine_batch(features, head, mode, exec);
            check_finite(&z, self.trunk.len() + hi)?;
            logits.push(z);
        }
        Ok(ForwardTrace {
            input: batch.clone(),
            pre,
            post,
            logits,
        })
    }

    /// Exact gradients of the scalar loss whose head-output gradients are
    /// `dlogits` (one matrix per head, same shape as `trace.logits`). For the
    /// SelectiveNet selection head this is the gradient w.r.t. the pre-sigmoid unit.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[Matrix]) -> Result<Gradients> {
        self.backward_with(trace, dlogits, Exec::default())
    }

    pub fn backward_with(
        &self,
        trace: &ForwardTrace,
        dlogits: &[Matrix],
        exec: Exec,
    ) -> Result<Gradients> {
        if dlogits.len() != self.heads.len() {
            return Err(Error::config(format!(
                "got {} head gradients for {} heads",
                dlogits.len(),
                self.heads.len()
            )));
        }
        for (i, (d, z)) in dlogits.iter().zip(&trace.logits).enumerate() {
            if d.rows != z.rows || d.cols != z.cols {
                return Err(Error::config(format!(
                    "head {i} gradient is {}x{}, expected {}x{}",
                    d.rows, d.cols, z.rows, z.cols
                )));
            }
        }
        let m = trace.batch_size();
        let features = trace.features();
        let mut grads = Gradients::zeros_like(self);
        let feat_dim = features.cols;
        let mut dfeat = Matrix::zeros(m, feat_dim);
        for (hi, (head, dz)) in self.heads.iter().zip(dlogits).enumerate() {
            grads.heads[hi] = layer_param_grad(dz, features, exec);
            accumulate_input_grad(&mut dfeat, dz, head);
        }
        let mut dact = dfeat;
        for li in (0..self.trunk.len()).rev() {
            let z = &trace.pre[li];
            let mut dz = dact;
            for (d, &zv) in dz.data.iter_mut().zip(&z.data) {
                if zv <= 0.0 {
                    *d = 0.0;
                }
            }
            let input = if li == 0 { &trace.input } else { &trace.post[li - 1] };
            grads.trunk[li] = layer_param_grad(&dz, input, exec);
            if li > 0 {
                let mut dprev = Matrix::zeros(m, input.cols);
                accumulate_input_grad(&mut dprev, &dz, &self.trunk[li]);
                dact = dprev;
            } else {
                break;
            }
        }
        Ok(grads)
    }

    /// Forward and softmax of the prediction head, row by row.
    pub fn predict_probs(&self, batch: &Matrix) -> Result<Vec<ProbOutput>> {
        let trace = self.forward(batch)?;
        let z = &trace.logits[HEAD_PRED];
        (0..z.rows).map(|i| ProbOutput::from_logits(z.row(i))).collect()
    }
}

fn check_finite(z: &Matrix, layer: usize) -> Result<()> {
    if z.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite activation at layer {layer}")))
    }
}

fn affine_batch(input: &Matrix, layer: &Dense, mode: NumericMode, exec: Exec) -> Matrix {
    let mut out = Matrix::zeros(input.rows, layer.out_dim);
    let work = input.rows * layer.in_dim * layer.out_dim;
    exec.above(work, PAR_WORK_THRESHOLD)
        .for_each_rows(&mut out.data, layer.out_dim, |i, row| {
            let x = input.row(i);
            for (j, o) in row.iter_mut().enumerate() {
                let w = &layer.weight[j * layer.in_dim..(j + 1) * layer.in_dim];
                let s: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                *o = mode.round(s + layer.bias[j]);
            }
        });
    out
}

/// dW = dZ^T A and db = column sums of dZ, summed over rows in ascending order.
fn layer_param_grad(dz: &Matrix, input: &Matrix, exec: Exec) -> Dense {
    let (out_dim, in_dim) = (dz.cols, input.cols);
    let mut g = Dense::zeros(in_dim, out_dim);
    let work = dz.rows * in_dim * out_dim;
    exec.above(work, PAR_WORK_THRESHOLD)
        .for_each_rows(&mut g.weight, in_dim, |j, wrow| {
            for i in 0..dz.rows {
                let d = dz.get(i, j);
                if d != 0.0 {
                    for (w, x) in wrow.iter_mut().zip(input.row(i)) {
                        *w += d * x;
                    }
                }
            }
        });
    for i in 0..dz.rows {
        for (b, d) in g.bias.iter_mut().zip(dz.row(i)) {
            *b += d;
        }
    }
    g
}

/// dX += dZ W.
fn accumulate_input_grad(dx: &mut Matrix, dz: &Matrix, layer: &Dense) {
    for i in 0..dz.rows {
        let drow = dz.row(i).to_vec();
        let xrow = dx.row_mut(i);
        for (j, d) in drow.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let w = &layer.weight[j * layer.in_dim..(j + 1) * layer.in_dim];
            for (x, wv) in xrow.iter_mut().zip(w) {
                *x += d * wv;
            }
        }
    }
}

/// Central differences `(L(p + eps) - L(p - eps)) / (2 eps)` for every parameter.
pub fn finite_difference_gradient<F>(lossfn: F, net: &Network, eps: f64) -> Result<Gradients>
where
    F: Fn(&Network) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let base = net.flat_params();
    let mut probe = net.clone();
    let mut flat = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        flat[k] = base[k] + eps;
        probe.set_flat_params(&flat)?;
        let up = lossfn(&probe)?;
        flat[k] = base[k] - eps;
        probe.set_flat_params(&flat)?;
        let down = lossfn(&probe)?;
        flat[k] = base[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!(
                "loss is non-finite when perturbing parameter {k}"
            )));
        }
        out.push((up - down) / (2.0 * eps));
    }
    let mut grads = Gradients::zeros_like(net);
    let mut off = 0;
    for l in grads.layers_mut() {
        let nw = l.weight.len();
        l.weight.copy_from_slice(&out[off..off + nw]);
        off += nw;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&out[off..off + nb]);
        off += nb;
    }
    Ok(grads)
}

/// Largest `|a - n| / max(|a|, |n|, guard)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], guard: f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(guard);
        let e = (a - n).abs() / denom;
        if e > worst.0 || e.is_nan() {
            worst = (e, k);
        }
    }
    worst
}
