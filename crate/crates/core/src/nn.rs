//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Every trainable model in the crate flattens its parameters into a single
//! vector ([`Parametric`]) and exposes its loss as a per-sample
//! [`Objective`]. Training, finite-difference checking and checkpointing
//! are generic over those two traits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Exec};

/// Samples per gradient chunk; fixed so reductions are order-stable.
const GRAD_CHUNK: usize = 32;
pub const CHECKPOINT_FORMAT: &str = "hrc-checkpoint/1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite loss at sample {index}")]
    NonFinite { index: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid network: {0}")]
    Shape(String),
    #[error("{path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the pre-activation and the activated value.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Identity => 1.0,
            Activation::Softplus => 1.0 / (1.0 + (-pre).exp()),
        }
    }
}

/// Fully connected layer; `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-limit..=limit)).collect();
        Layer { in_dim, out_dim, weights, bias: vec![0.0; out_dim], activation }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn pre_activation(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            out.push(b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Intermediate values of one forward pass, needed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an input")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Layer>", into = "Vec<Layer>")]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl TryFrom<Vec<Layer>> for Mlp {
    type Error = NetError;
    fn try_from(layers: Vec<Layer>) -> Result<Self, NetError> {
        Mlp::from_layers(layers)
    }
}

impl From<Mlp> for Vec<Layer> {
    fn from(m: Mlp) -> Self {
        m.layers
    }
}

impl Mlp {
    /// Network with layer widths `dims` (input first), `hidden` activation
    /// on inner layers and `output` on the last.
    pub fn new<R: Rng>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs an input and an output width");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::glorot(w[0], w[1], if i == last { output } else { hidden }, rng))
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Shape("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(NetError::Shape(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(NetError::Shape(format!("layer {i} parameter sizes do not match its dims")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(NetError::Shape(format!("layer {i} has non-finite parameters")));
            }
        }
        if let Some(i) = layers.windows(2).position(|w| w[0].out_dim != w[1].in_dim) {
            return Err(NetError::Shape(format!("layers {i} and {} do not chain", i + 1)));
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Checked forward pass.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::Dimension { expected: self.input_dim(), got: x.len() });
        }
        Ok(self.forward(x))
    }

    /// Forward pass; the caller guarantees `x.len() == input_dim()`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in &self.layers {
            l.pre_activation(&cur, &mut next);
            for v in next.iter_mut() {
                *v = l.activation.apply(*v);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for l in &self.layers {
            let mut z = Vec::with_capacity(l.out_dim);
            l.pre_activation(acts.last().unwrap(), &mut z);
            let a = z.iter().map(|&v| l.activation.apply(v)).collect();
            pre.push(z);
            acts.push(a);
        }
        Trace { acts, pre }
    }

    /// Backpropagates `d_out = dL/d(output)`, accumulating parameter
    /// gradients into `grad` (layout of [`Parametric::params`]). Returns
    /// `dL/d(input)`.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.num_params());
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.num_params();
        }
        let mut delta = d_out.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let post = &trace.acts[li + 1];
            for ((d, &z), &a) in delta.iter_mut().zip(&trace.pre[li]).zip(post) {
                *d *= l.activation.derivative(z, a);
            }
            let input = &trace.acts[li];
            let (gw, gb) = grad[offsets[li]..offsets[li] + l.num_params()].split_at_mut(l.weights.len());
            let mut d_in = vec![0.0; l.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = o * l.in_dim;
                for i in 0..l.in_dim {
                    gw[row + i] += d * input[i];
                    d_in[i] += d * l.weights[row + i];
                }
            }
            delta = d_in;
        }
        delta
    }

    /// Jacobian `d output / d input` by reverse mode, one row per output.
    pub fn jacobian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let trace = self.forward_trace(x);
        let mut scratch = vec![0.0; self.num_params()];
        (0..self.output_dim())
            .map(|k| {
                let mut e = vec![0.0; self.output_dim()];
                e[k] = 1.0;
                self.backward(&trace, &e, &mut scratch)
            })
            .collect()
    }
}

/// Models whose parameters flatten into one vector.
pub trait Parametric {
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    /// Overwrites parameters from the front of `p`, returning how many were read.
    fn set_params(&mut self, p: &[f64]) -> usize;
}

impl Parametric for Mlp {
    fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn set_params(&mut self, p: &[f64]) -> usize {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        off
    }
}

/// Per-layer gradient arrays mirroring an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GradientSet {
    pub fn from_flat(net: &Mlp, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), net.num_params());
        let mut off = 0;
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let weights = flat[off..off + l.weights.len()].to_vec();
                off += l.weights.len();
                let bias = flat[off..off + l.bias.len()].to_vec();
                off += l.bias.len();
                LayerGrad { weights, bias }
            })
            .collect();
        GradientSet { layers }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }
}

/// A mean-over-samples loss.
pub trait Objective<M>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loss of sample `i`. When `grad` is given, `d loss / d params` is
    /// added to it.
    fn sample_loss(&self, model: &M, i: usize, grad: Option<&mut [f64]>) -> f64;
}

/// Mean loss over `batch` without gradients.
pub fn batch_loss<M: Sync, O: Objective<M>>(model: &M, obj: &O, batch: &[usize], exec: Exec) -> Result<f64, NetError> {
    let (sum, bad) = par::chunked_fold(
        exec,
        batch.len(),
        GRAD_CHUNK,
        |r| {
            let mut s = 0.0;
            for &i in &batch[r] {
                let l = obj.sample_loss(model, i, None);
                if !l.is_finite() {
                    return (s, Some(i));
                }
                s += l;
            }
            (s, None)
        },
        (0.0, None),
        |(a, ea), (b, eb)| (a + b, ea.or(eb)),
    );
    match bad {
        Some(index) => Err(NetError::NonFinite { index }),
        None => Ok(sum / batch.len().max(1) as f64),
    }
}

/// Mean loss and gradient over `batch`.
pub fn batch_loss_grad<M, O>(model: &M, obj: &O, batch: &[usize], exec: Exec) -> Result<(f64, Vec<f64>), NetError>
where
    M: Parametric + Sync,
    O: Objective<M>,
{
    let np = model.num_params();
    let (sum, mut grad, bad) = par::chunked_fold(
        exec,
        batch.len(),
        GRAD_CHUNK,
        |r| {
            let mut g = vec![0.0; np];
            let mut s = 0.0;
            for &i in &batch[r] {
                let l = obj.sample_loss(model, i, Some(&mut g));
                if !l.is_finite() {
                    return (s, g, Some(i));
                }
                s += l;
            }
            (s, g, None)
        },
        (0.0, vec![0.0; np], None),
        |(sa, mut ga, ea), (sb, gb, eb)| {
            for (a, b) in ga.iter_mut().zip(&gb) {
                *a += b;
            }
            (sa + sb, ga, ea.or(eb))
        },
    );
    if let Some(index) = bad {
        return Err(NetError::NonFinite { index });
    }
    let n = batch.len().max(1) as f64;
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((sum / n, grad))
}

/// Largest relative error between the analytic gradient and central finite
/// differences: `max |a - n| / (|a| + |n| + 1e-12)`.
pub fn grad_check<M, O>(model: &M, obj: &O, batch: &[usize], step: f64) -> Result<f64, NetError>
where
    M: Parametric + Clone + Sync,
    O: Objective<M>,
{
    if step <= 0.0 || step.is_nan() {
        return Err(NetError::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let (_, analytic) = batch_loss_grad(model, obj, batch, Exec::Sequential)?;
    let base = model.params();
    let mut probe = model.clone();
    let mut p = base.clone();
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        p[k] = base[k] + step;
        probe.set_params(&p);
        let up = batch_loss(&probe, obj, batch, Exec::Sequential)?;
        p[k] = base[k] - step;
        probe.set_params(&p);
        let down = batch_loss(&probe, obj, batch, Exec::Sequential)?;
        p[k] = base[k];
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[k] - numeric).abs() / (analytic[k].abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.02, epochs: 30, batch_size: 128, weight_decay: 1e-5, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NetError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(NetError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    /// Mean mini-batch loss (including the L2 penalty) per epoch.
    pub loss_trace: Vec<f64>,
}

/// Plain mini-batch gradient descent with L2 weight decay.
///
/// Sample order is reshuffled every epoch from a generator seeded once with
/// `config.seed`; batches larger than the data fall back to full batch.
pub fn train<M, O>(mut model: M, obj: &O, config: &TrainConfig) -> Result<Trained<M>, NetError>
where
    M: Parametric + Sync,
    O: Objective<M>,
{
    config.validate()?;
    let n = obj.len();
    if n == 0 {
        return Err(NetError::Config("cannot train on an empty dataset".into()));
    }
    let batch_size = config.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut params = model.params();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let exec = Exec::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(batch_size) {
            let (loss, grad) = batch_loss_grad(&model, obj, batch, exec).map_err(|e| match e {
                NetError::NonFinite { .. } => NetError::Diverged { epoch },
                other => other,
            })?;
            let penalty = config.weight_decay * params.iter().map(|p| p * p).sum::<f64>();
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * (g + 2.0 * config.weight_decay * *p);
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(NetError::Diverged { epoch });
            }
            model.set_params(&params);
            total += loss + penalty;
            batches += 1;
        }
        let mean = total / batches as f64;
        if !mean.is_finite() {
            return Err(NetError::Diverged { epoch });
        }
        loss_trace.push(mean);
    }
    Ok(Trained { model, loss_trace })
}

/// Adapter turning an output-level loss into an [`Objective`] over a plain
/// [`Mlp`]. `loss(i, output)` returns the loss of sample `i` and its
/// gradient with respect to the network output.
pub struct MlpObjective<'a, L> {
    pub inputs: &'a [Vec<f64>],
    pub loss: L,
}

impl<L> Objective<Mlp> for MlpObjective<'_, L>
where
    L: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn sample_loss(&self, net: &Mlp, i: usize, grad: Option<&mut [f64]>) -> f64 {
        match grad {
            None => (self.loss)(i, &net.forward(&self.inputs[i])).0,
            Some(g) => {
                let trace = net.forward_trace(&self.inputs[i]);
                let (l, d_out) = (self.loss)(i, trace.output());
                net.backward(&trace, &d_out, g);
                l
            }
        }
    }
}

/// Exact gradient of the mean batch loss for a plain network.
pub fn mlp_grad<L>(net: &Mlp, inputs: &[Vec<f64>], loss: L) -> Result<GradientSet, NetError>
where
    L: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
{
    if let Some(x) = inputs.iter().find(|x| x.len() != net.input_dim()) {
        return Err(NetError::Dimension { expected: net.input_dim(), got: x.len() });
    }
    let obj = MlpObjective { inputs, loss };
    let batch: Vec<usize> = (0..inputs.len()).collect();
    let (_, g) = batch_loss_grad(net, &obj, &batch, Exec::default())?;
    Ok(GradientSet::from_flat(net, &g))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of `softmax(logits)` against class `label`, with its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = log_total - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - log_total).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-feature z-score transform fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant features get unit scale.
    pub fn fit<'a, I>(rows: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for k in 0..dim {
                sum[k] += r[k];
                sq[k] += r[k] * r[k];
            }
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    format: String,
    kind: String,
    model: T,
}

#[derive(Deserialize)]
struct CheckpointHeader {
    format: String,
    kind: String,
}

/// Writes a versioned JSON checkpoint tagged with `kind`.
pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, model: &T) -> Result<(), NetError> {
    let ck = Checkpoint { format: CHECKPOINT_FORMAT.to_string(), kind: kind.to_string(), model };
    let text = serde_json::to_string_pretty(&ck)
        .map_err(|e| NetError::Checkpoint { path: path.into(), msg: e.to_string() })?;
    std::fs::write(path, text + "\n").map_err(|e| NetError::Checkpoint { path: path.into(), msg: e.to_string() })
}

/// Model kind recorded in a checkpoint header.
pub fn checkpoint_kind(path: &Path) -> Result<String, NetError> {
    let err = |msg: String| NetError::Checkpoint { path: path.into(), msg };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(err(format!("unsupported format `{}`", header.format)));
    }
    Ok(header.kind)
}

/// Reads a checkpoint, rejecting a wrong format tag or model kind.
pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, NetError> {
    let err = |msg: String| NetError::Checkpoint { path: path.into(), msg };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(err(format!("unsupported format `{}`", header.format)));
    }
    if header.kind != kind {
        return Err(err(format!("expected a `{kind}` checkpoint, found `{}`", header.kind)));
    }
    let ck: Checkpoint<T> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    Ok(ck.model)
}
