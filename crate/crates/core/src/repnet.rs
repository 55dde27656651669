//! Multi-task representation network (shared hidden module, revenue head,
//! propensity head) and the K-way classifier distilled from
//! representation + K-Means.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{CellImputer, ClusterModel};
use crate::data::{Dataset, TreatmentSet};
use crate::nn::{
    self, argmax, softmax, softmax_cross_entropy, Activation, Mlp, NetError, Objective, Parametric, Standardizer,
    TrainConfig, Trained,
};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// MLP over `[z ‖ onehot(t)]`, for randomized logs.
    Concat,
    /// Hypernetwork monotone in the treatment value, for observational logs.
    Monotonic,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Concat => "concat",
            HeadKind::Monotonic => "monotonic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepNetConfig {
    pub head: HeadKind,
    /// Representation width.
    pub d_z: usize,
    /// Hidden width of the representation module.
    pub hidden: usize,
    /// Hidden width of every head.
    pub head_hidden: usize,
    /// Width of the repeated treatment input of the monotonic head.
    pub repeat_dim: usize,
    /// Weight of the propensity cross-entropy.
    pub alpha: f64,
}

impl Default for RepNetConfig {
    fn default() -> Self {
        RepNetConfig { head: HeadKind::Concat, d_z: 32, hidden: 64, head_hidden: 32, repeat_dim: 8, alpha: 1.0 }
    }
}

impl RepNetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.d_z == 0 || self.hidden == 0 || self.head_hidden == 0 || self.repeat_dim == 0 {
            return Err(NetError::Config("repnet widths must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(NetError::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `r = |o(z)| · tanh(|W(z)| · repeat(t))` with `W` a `q x q` matrix and
/// `o` a `q`-vector, both produced from `z`. Every generated weight is
/// nonnegative, so `r` is nondecreasing in `t ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicHead {
    w_inner: Mlp,
    w_outer: Mlp,
    repeat_dim: usize,
}

impl MonotonicHead {
    pub fn new<R: Rng>(d_z: usize, hidden: usize, repeat_dim: usize, rng: &mut R) -> Self {
        let q = repeat_dim;
        MonotonicHead {
            w_inner: Mlp::new(&[d_z, hidden, q * q], Activation::Tanh, Activation::Identity, rng),
            w_outer: Mlp::new(&[d_z, hidden, q], Activation::Tanh, Activation::Identity, rng),
            repeat_dim,
        }
    }

    pub fn from_parts(w_inner: Mlp, w_outer: Mlp, repeat_dim: usize) -> Result<Self, NetError> {
        let q = repeat_dim;
        if w_inner.output_dim() != q * q || w_outer.output_dim() != q || w_inner.input_dim() != w_outer.input_dim() {
            return Err(NetError::Shape(format!("hypernetwork outputs must be {q}x{q} and {q} from one input")));
        }
        Ok(MonotonicHead { w_inner, w_outer, repeat_dim })
    }

    pub fn repeat_dim(&self) -> usize {
        self.repeat_dim
    }

    /// Generated weights `(|W(z)|, |o(z)|)`.
    pub fn weights(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = self.w_inner.forward(z).into_iter().map(f64::abs).collect();
        let o = self.w_outer.forward(z).into_iter().map(f64::abs).collect();
        (w, o)
    }

    /// Response at treatment input `t`.
    pub fn response(&self, z: &[f64], t: f64) -> f64 {
        let (w, o) = self.weights(z);
        let q = self.repeat_dim;
        (0..q).map(|i| o[i] * (t * w[i * q..(i + 1) * q].iter().sum::<f64>()).tanh()).sum()
    }

    /// Response, with `d_r · dr/dparams` accumulated into `grad`; returns
    /// `(r, d_r · dr/dz)` where `d_r = dloss(r)`.
    fn response_grad(&self, z: &[f64], t: f64, grad: &mut [f64], dloss: impl Fn(f64) -> f64) -> (f64, Vec<f64>) {
        let q = self.repeat_dim;
        let ti = self.w_inner.forward_trace(z);
        let to = self.w_outer.forward_trace(z);
        let (w, o) = (ti.output(), to.output());
        let h: Vec<f64> = (0..q).map(|i| (t * w[i * q..(i + 1) * q].iter().map(|v| v.abs()).sum::<f64>()).tanh()).collect();
        let r: f64 = (0..q).map(|i| o[i].abs() * h[i]).sum();
        let d = dloss(r);
        let d_o: Vec<f64> = (0..q).map(|i| d * sign(o[i]) * h[i]).collect();
        let mut d_w = vec![0.0; q * q];
        for i in 0..q {
            let common = d * o[i].abs() * (1.0 - h[i] * h[i]) * t;
            for b in 0..q {
                d_w[i * q + b] = common * sign(w[i * q + b]);
            }
        }
        let (gi, go) = grad.split_at_mut(self.w_inner.num_params());
        let mut dz = self.w_inner.backward(&ti, &d_w, gi);
        for (a, b) in dz.iter_mut().zip(self.w_outer.backward(&to, &d_o, go)) {
            *a += b;
        }
        (r, dz)
    }
}

impl Parametric for MonotonicHead {
    fn num_params(&self) -> usize {
        self.w_inner.num_params() + self.w_outer.num_params()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.w_inner.params();
        p.extend(self.w_outer.params());
        p
    }

    fn set_params(&mut self, p: &[f64]) -> usize {
        let n = self.w_inner.set_params(p);
        n + self.w_outer.set_params(&p[n..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RevenueHead {
    Concat(Mlp),
    Monotonic(MonotonicHead),
}

impl RevenueHead {
    pub fn kind(&self) -> HeadKind {
        match self {
            RevenueHead::Concat(_) => HeadKind::Concat,
            RevenueHead::Monotonic(_) => HeadKind::Monotonic,
        }
    }

    fn concat_input(z: &[f64], arm: usize, m: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(z.len() + m);
        v.extend_from_slice(z);
        v.extend((0..m).map(|j| if j == arm { 1.0 } else { 0.0 }));
        v
    }

    fn predict(&self, z: &[f64], arm: usize, t_inputs: &[f64]) -> f64 {
        match self {
            RevenueHead::Concat(net) => net.forward(&Self::concat_input(z, arm, t_inputs.len()))[0],
            RevenueHead::Monotonic(h) => h.response(z, t_inputs[arm]),
        }
    }

    fn predict_grad(&self, z: &[f64], arm: usize, t_inputs: &[f64], grad: &mut [f64], dloss: impl Fn(f64) -> f64) -> (f64, Vec<f64>) {
        match self {
            RevenueHead::Concat(net) => {
                let trace = net.forward_trace(&Self::concat_input(z, arm, t_inputs.len()));
                let r = trace.output()[0];
                let mut dz = net.backward(&trace, &[dloss(r)], grad);
                dz.truncate(z.len());
                (r, dz)
            }
            RevenueHead::Monotonic(h) => h.response_grad(z, t_inputs[arm], grad, dloss),
        }
    }
}

impl Parametric for RevenueHead {
    fn num_params(&self) -> usize {
        match self {
            RevenueHead::Concat(n) => n.num_params(),
            RevenueHead::Monotonic(h) => h.num_params(),
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            RevenueHead::Concat(n) => n.params(),
            RevenueHead::Monotonic(h) => h.params(),
        }
    }

    fn set_params(&mut self, p: &[f64]) -> usize {
        match self {
            RevenueHead::Concat(n) => n.set_params(p),
            RevenueHead::Monotonic(h) => h.set_params(p),
        }
    }
}

/// Shared representation module plus revenue and propensity heads.
///
/// Features are z-scored before the first layer; revenue is learned in
/// units of the training revenue RMS (a positive rescaling, so monotonicity
/// in the treatment is unaffected).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepNet {
    standardizer: Standardizer,
    rep: Mlp,
    revenue_head: RevenueHead,
    propensity_head: Mlp,
    alpha: f64,
    /// Treatment input of each arm for the monotonic head.
    t_inputs: Vec<f64>,
    revenue_scale: f64,
}

impl RepNet {
    pub fn new<R: Rng>(config: &RepNetConfig, d: usize, treatments: &TreatmentSet, rng: &mut R) -> Result<Self, NetError> {
        config.validate()?;
        let m = treatments.count();
        let rep = Mlp::new(&[d, config.hidden, config.d_z], Activation::Tanh, Activation::Tanh, rng);
        let revenue_head = match config.head {
            HeadKind::Concat => RevenueHead::Concat(Mlp::new(
                &[config.d_z + m, config.head_hidden, 1],
                Activation::Tanh,
                Activation::Identity,
                rng,
            )),
            HeadKind::Monotonic => {
                RevenueHead::Monotonic(MonotonicHead::new(config.d_z, config.head_hidden, config.repeat_dim, rng))
            }
        };
        let propensity_head = Mlp::new(&[config.d_z, config.head_hidden, m], Activation::Tanh, Activation::Identity, rng);
        Ok(RepNet {
            standardizer: Standardizer::identity(d),
            rep,
            revenue_head,
            propensity_head,
            alpha: config.alpha,
            t_inputs: (0..m).map(|j| treatments.scaled(j)).collect(),
            revenue_scale: 1.0,
        })
    }

    pub fn head_kind(&self) -> HeadKind {
        self.revenue_head.kind()
    }

    pub fn revenue_head(&self) -> &RevenueHead {
        &self.revenue_head
    }

    pub fn propensity_head_mut(&mut self) -> &mut Mlp {
        &mut self.propensity_head
    }

    pub fn num_treatments(&self) -> usize {
        self.t_inputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn d_z(&self) -> usize {
        self.rep.output_dim()
    }

    /// Treatment input of arm `t` for the monotonic head.
    pub fn treatment_input(&self, t: usize) -> f64 {
        self.t_inputs[t]
    }

    pub fn revenue_scale(&self) -> f64 {
        self.revenue_scale
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::Dimension { expected: self.input_dim(), got: x.len() });
        }
        Ok(self.rep.forward(&self.standardizer.apply(x)))
    }

    pub fn embed_batch<X: AsRef<[f64]> + Sync>(&self, xs: &[X], exec: Exec) -> Result<Vec<Vec<f64>>, NetError> {
        if let Some(x) = xs.iter().find(|x| x.as_ref().len() != self.input_dim()) {
            return Err(NetError::Dimension { expected: self.input_dim(), got: x.as_ref().len() });
        }
        Ok(par::map(exec, xs, |x| self.rep.forward(&self.standardizer.apply(x.as_ref()))))
    }

    /// Predicted revenue of arm `t` at representation `z`.
    pub fn predict_revenue(&self, z: &[f64], t: usize) -> Result<f64, NetError> {
        if t >= self.num_treatments() {
            return Err(NetError::Shape(format!("treatment {t} out of range [0, {})", self.num_treatments())));
        }
        if z.len() != self.d_z() {
            return Err(NetError::Dimension { expected: self.d_z(), got: z.len() });
        }
        Ok(self.revenue_scale * self.revenue_head.predict(z, t, &self.t_inputs))
    }

    /// Predicted revenue of every arm.
    pub fn predict_all(&self, z: &[f64]) -> Vec<f64> {
        (0..self.num_treatments()).map(|t| self.revenue_scale * self.revenue_head.predict(z, t, &self.t_inputs)).collect()
    }

    /// Monotonic-head response at an arbitrary treatment input, in revenue
    /// units. `None` for the concat head.
    pub fn response_at(&self, z: &[f64], t_input: f64) -> Option<f64> {
        match &self.revenue_head {
            RevenueHead::Monotonic(h) => Some(self.revenue_scale * h.response(z, t_input)),
            RevenueHead::Concat(_) => None,
        }
    }

    pub fn predict_propensity(&self, z: &[f64]) -> Vec<f64> {
        softmax(&self.propensity_head.forward(z))
    }

    /// Checkpoint kind string recording the revenue head.
    pub fn checkpoint_kind(&self) -> String {
        format!("repnet/{}", self.head_kind())
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        nn::save_checkpoint(path, &self.checkpoint_kind(), self)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let kind = nn::checkpoint_kind(path)?;
        if !kind.starts_with("repnet/") {
            return Err(NetError::Checkpoint { path: path.into(), msg: format!("expected a repnet checkpoint, found `{kind}`") });
        }
        let net: RepNet = nn::load_checkpoint(path, &kind)?;
        if net.checkpoint_kind() != kind {
            return Err(NetError::Checkpoint { path: path.into(), msg: format!("header `{kind}` disagrees with the stored head") });
        }
        Ok(net)
    }
}

impl Parametric for RepNet {
    fn num_params(&self) -> usize {
        self.rep.num_params() + self.revenue_head.num_params() + self.propensity_head.num_params()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.rep.params();
        p.extend(self.revenue_head.params());
        p.extend(self.propensity_head.params());
        p
    }

    fn set_params(&mut self, p: &[f64]) -> usize {
        let mut n = self.rep.set_params(p);
        n += self.revenue_head.set_params(&p[n..]);
        n + self.propensity_head.set_params(&p[n..])
    }
}

/// Mean of `(r̂(z_i, t_i) − y_i)² + α · CE(propensity(z_i), t_i)` over
/// standardized inputs and scaled revenue targets.
pub struct RepNetObjective {
    pub inputs: Vec<Vec<f64>>,
    pub arms: Vec<usize>,
    pub targets: Vec<f64>,
}

impl RepNetObjective {
    /// Prepares `dataset` for `net`, whose standardizer and revenue scale
    /// are already set.
    pub fn new(net: &RepNet, dataset: &Dataset) -> Self {
        let s = dataset.samples();
        RepNetObjective {
            inputs: s.iter().map(|s| net.standardizer.apply(&s.features)).collect(),
            arms: s.iter().map(|s| s.treatment).collect(),
            targets: s.iter().map(|s| s.revenue / net.revenue_scale).collect(),
        }
    }
}

impl Objective<RepNet> for RepNetObjective {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn sample_loss(&self, net: &RepNet, i: usize, grad: Option<&mut [f64]>) -> f64 {
        let (x, t, y) = (&self.inputs[i], self.arms[i], self.targets[i]);
        match grad {
            None => {
                let z = net.rep.forward(x);
                let r = net.revenue_head.predict(&z, t, &net.t_inputs);
                let mut loss = (r - y) * (r - y);
                if net.alpha > 0.0 {
                    loss += net.alpha * softmax_cross_entropy(&net.propensity_head.forward(&z), t).0;
                }
                loss
            }
            Some(g) => {
                let n_rep = net.rep.num_params();
                let n_head = net.revenue_head.num_params();
                let (g_rep, rest) = g.split_at_mut(n_rep);
                let (g_head, g_prop) = rest.split_at_mut(n_head);
                let trace = net.rep.forward_trace(x);
                let z = trace.output();
                let (r, mut dz) = net.revenue_head.predict_grad(z, t, &net.t_inputs, g_head, |r| 2.0 * (r - y));
                let mut loss = (r - y) * (r - y);
                if net.alpha > 0.0 {
                    let pt = net.propensity_head.forward_trace(z);
                    let (ce, mut d) = softmax_cross_entropy(pt.output(), t);
                    d.iter_mut().for_each(|v| *v *= net.alpha);
                    for (a, b) in dz.iter_mut().zip(net.propensity_head.backward(&pt, &d, g_prop)) {
                        *a += b;
                    }
                    loss += net.alpha * ce;
                }
                net.rep.backward(&trace, &dz, g_rep);
                loss
            }
        }
    }
}

/// Fits the standardizer and revenue scale on `dataset`, then trains all
/// three parts jointly. Initialization draws from `train.seed`.
pub fn train_repnet(dataset: &Dataset, config: &RepNetConfig, train: &TrainConfig) -> Result<Trained<RepNet>, NetError> {
    if dataset.is_empty() {
        return Err(NetError::Config("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(1);
    let mut net = RepNet::new(config, dataset.feature_dim(), dataset.treatments(), &mut rng)?;
    net.standardizer = Standardizer::fit(dataset.samples().iter().map(|s| s.features.as_slice()), dataset.feature_dim());
    let ms = dataset.samples().iter().map(|s| s.revenue * s.revenue).sum::<f64>() / dataset.len() as f64;
    net.revenue_scale = if ms > 0.0 { ms.sqrt() } else { 1.0 };
    let obj = RepNetObjective::new(&net, dataset);
    nn::train(net, &obj, train)
}

impl CellImputer for RepNet {
    fn revenue_mean(&self, dataset: &Dataset, members: &[usize], arm: usize) -> f64 {
        let s = dataset.samples();
        let total: f64 = members
            .iter()
            .map(|&i| {
                let z = self.rep.forward(&self.standardizer.apply(&s[i].features));
                self.revenue_scale * self.revenue_head.predict(&z, arm, &self.t_inputs)
            })
            .sum();
        total / members.len().max(1) as f64
    }
}

/// K-way classifier mapping raw features straight to a cluster index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledClassifier {
    standardizer: Standardizer,
    net: Mlp,
    k: usize,
}

/// Hidden width of the distilled classifier.
pub const CLASSIFIER_HIDDEN: usize = 64;
const CLASSIFIER_KIND: &str = "classifier";

impl DistilledClassifier {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.net.forward(&self.standardizer.apply(x))
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Argmax of the logits, lowest index on ties.
    pub fn classify(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn classify_batch<X: AsRef<[f64]> + Sync>(&self, xs: &[X], exec: Exec) -> Vec<usize> {
        par::map(exec, xs, |x| self.classify(x.as_ref()))
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        nn::save_checkpoint(path, CLASSIFIER_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        nn::load_checkpoint(path, CLASSIFIER_KIND)
    }
}

impl Parametric for DistilledClassifier {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.net.params()
    }

    fn set_params(&mut self, p: &[f64]) -> usize {
        self.net.set_params(p)
    }
}

/// Cross-entropy of the classifier against fixed integer labels.
pub struct LabelObjective {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Objective<DistilledClassifier> for LabelObjective {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn sample_loss(&self, c: &DistilledClassifier, i: usize, grad: Option<&mut [f64]>) -> f64 {
        match grad {
            None => softmax_cross_entropy(&c.net.forward(&self.inputs[i]), self.labels[i]).0,
            Some(g) => {
                let trace = c.net.forward_trace(&self.inputs[i]);
                let (l, d) = softmax_cross_entropy(trace.output(), self.labels[i]);
                c.net.backward(&trace, &d, g);
                l
            }
        }
    }
}

/// Trains a classifier on `features → labels` with labels in `[0, k)`.
pub fn train_classifier<X: AsRef<[f64]>>(features: &[X], labels: &[usize], k: usize, config: &TrainConfig) -> Result<Trained<DistilledClassifier>, NetError> {
    if features.is_empty() {
        return Err(NetError::Config("cannot distill an empty dataset".into()));
    }
    if k == 0 || labels.iter().any(|&l| l >= k) || labels.len() != features.len() {
        return Err(NetError::Shape(format!("labels must be {} values in [0, {k})", features.len())));
    }
    let d = features[0].as_ref().len();
    let standardizer = Standardizer::fit(features.iter().map(AsRef::as_ref), d);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let net = Mlp::new(&[d, CLASSIFIER_HIDDEN, k], Activation::Tanh, Activation::Identity, &mut rng);
    let obj = LabelObjective { inputs: features.iter().map(|x| standardizer.apply(x.as_ref())).collect(), labels: labels.to_vec() };
    nn::train(DistilledClassifier { standardizer, net, k }, &obj, config)
}

/// Compresses `embed` followed by nearest-center assignment into one
/// classifier over raw features.
pub fn distill(repnet: &RepNet, clusters: &ClusterModel, dataset: &Dataset, config: &TrainConfig) -> Result<Trained<DistilledClassifier>, NetError> {
    let features = dataset.features();
    let z = repnet.embed_batch(&features, Exec::default())?;
    let labels = clusters.assign_batch(&z, Exec::default());
    train_classifier(&features, &labels, clusters.k(), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{kmeans_fit, KMeansConfig};
    use crate::data::{DatasetKind, Sample};
    use crate::nn::{grad_check, Layer};
    use rand_distr::StandardNormal;

    fn small_config(head: HeadKind) -> RepNetConfig {
        RepNetConfig { head, d_z: 3, hidden: 4, head_hidden: 4, repeat_dim: 2, alpha: 0.7 }
    }

    fn random_dataset(n: usize, d: usize, m: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let features: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let treatment = i % m;
                let revenue = features[0] + treatment as f64 * 0.5 + rng.sample::<f64, _>(StandardNormal) * 0.1;
                Sample { features, treatment, cost: 0.0, revenue, propensity: 1.0 / m as f64 }
            })
            .collect();
        let ts = TreatmentSet::from_values((1..=m).map(|j| j as f64 * 0.1).collect()).unwrap();
        Dataset::new(samples, DatasetKind::Rct, ts, d).unwrap()
    }

    fn random_net(head: HeadKind, seed: u64, ds: &Dataset) -> RepNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = RepNet::new(&small_config(head), ds.feature_dim(), ds.treatments(), &mut rng).unwrap();
        // Push biases off zero so no unit sits exactly at a kink.
        let p: Vec<f64> = net.params().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        net.set_params(&p);
        net
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for head in [HeadKind::Concat, HeadKind::Monotonic] {
            for seed in 0..20 {
                let ds = random_dataset(6, 3, 3, seed);
                let net = random_net(head, seed + 100, &ds);
                let obj = RepNetObjective::new(&net, &ds);
                let err = grad_check(&net, &obj, &[0, 1, 2, 3, 4, 5], 1e-5).unwrap();
                assert!(err < 1e-4, "{head} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Mlp::new(&[3, 4, 3], Activation::Tanh, Activation::Identity, &mut rng);
            let c = DistilledClassifier { standardizer: Standardizer::identity(3), net, k: 3 };
            let obj = LabelObjective {
                inputs: (0..5).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect(),
                labels: vec![0, 1, 2, 1, 0],
            };
            assert!(grad_check(&c, &obj, &[0, 1, 2, 3, 4], 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn embed_is_deterministic_and_shaped() {
        let ds = random_dataset(4, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = RepNet::new(&RepNetConfig::default(), 3, ds.treatments(), &mut rng).unwrap();
        let x = [0.3, -1.0, 2.0];
        assert_eq!(net.embed(&x).unwrap(), net.embed(&x).unwrap());
        assert_eq!(net.embed(&x).unwrap().len(), 32);
        assert!(matches!(net.embed(&[1.0]), Err(NetError::Dimension { .. })));
        assert!(net.predict_revenue(&net.embed(&x).unwrap(), 2).is_err());
    }

    fn constant_mlp(value: f64, in_dim: usize) -> Mlp {
        Mlp::from_layers(vec![Layer {
            in_dim,
            out_dim: 1,
            weights: vec![0.0; in_dim],
            bias: vec![value],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn monotonic_closed_form() {
        let (a, b) = (-1.5, 0.8);
        let head = MonotonicHead::from_parts(constant_mlp(b, 2), constant_mlp(a, 2), 1).unwrap();
        let z = [0.4, -0.2];
        for t in [0.0, 0.25, 0.5, 1.0] {
            assert!((head.response(&z, t) - a.abs() * (b.abs() * t).tanh()).abs() < 1e-15);
        }
        assert_eq!(head.response(&z, 0.0), 0.0);
    }

    #[test]
    fn monotonic_head_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = MonotonicHead::new(4, 8, 4, &mut rng);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
            let t1: f64 = rng.random();
            let t2: f64 = rng.random();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            assert!(head.response(&z, hi) >= head.response(&z, lo));
        }
    }

    #[test]
    fn uniform_propensity_and_normalization() {
        let ds = random_dataset(4, 3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = RepNet::new(&small_config(HeadKind::Concat), 3, ds.treatments(), &mut rng).unwrap();
        for z in 0..1000 {
            let z: Vec<f64> = (0..3).map(|k| ((z * 31 + k * 7) % 17) as f64 / 4.0 - 2.0).collect();
            assert!((net.predict_propensity(&z).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let zeros = vec![0.0; net.propensity_head_mut().num_params()];
        net.propensity_head_mut().set_params(&zeros);
        assert_eq!(net.predict_propensity(&[0.1, 0.2, 0.3]), vec![0.25; 4]);
    }

    #[test]
    fn alpha_zero_leaves_propensity_head_untouched() {
        let ds = random_dataset(64, 3, 3, 4);
        let cfg = RepNetConfig { alpha: 0.0, ..small_config(HeadKind::Concat) };
        let tc = TrainConfig { epochs: 3, batch_size: 16, ..TrainConfig::default() };
        let trained = train_repnet(&ds, &cfg, &tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(1);
        let init = RepNet::new(&cfg, 3, ds.treatments(), &mut rng).unwrap();
        // Weight decay still shrinks the head, so compare against pure decay.
        let decay = (1.0 - 2.0 * tc.learning_rate * tc.weight_decay).powi(3 * 4);
        let trained_p = trained.model.propensity_head.params();
        for (a, b) in trained_p.iter().zip(init.propensity_head.params()) {
            assert!((a - b * decay).abs() < 1e-12);
        }
        let obj = RepNetObjective::new(&trained.model, &ds);
        let (_, g) = nn::batch_loss_grad(&trained.model, &obj, &(0..64).collect::<Vec<_>>(), Exec::Sequential).unwrap();
        let n = trained.model.rep.num_params() + trained.model.revenue_head.num_params();
        assert!(g[n..].iter().all(|&v| v == 0.0));
    }

    fn two_blob_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let g = i % 2;
                let c = if g == 0 { -3.0 } else { 3.0 };
                let features = vec![c + rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)];
                let treatment = (i / 2) % 2;
                let revenue = 1.0 + g as f64 + treatment as f64 * (0.5 + g as f64) + 0.2 * rng.sample::<f64, _>(StandardNormal);
                Sample { features, treatment, cost: 0.0, revenue, propensity: 0.5 }
            })
            .collect();
        Dataset::new(samples, DatasetKind::Rct, TreatmentSet::from_values(vec![0.05, 0.1]).unwrap(), 2).unwrap()
    }

    #[test]
    fn rct_training_fits_revenue_and_arm_frequencies() {
        let ds = two_blob_dataset(2000, 6);
        let tc = TrainConfig { epochs: 40, batch_size: 32, learning_rate: 0.05, ..TrainConfig::default() };
        let net = train_repnet(&ds, &RepNetConfig { d_z: 8, hidden: 16, ..RepNetConfig::default() }, &tc).unwrap().model;
        let test = two_blob_dataset(1000, 7);
        let mut sse = 0.0;
        let mut mean_p = [0.0; 2];
        for s in test.samples() {
            let z = net.embed(&s.features).unwrap();
            sse += (net.predict_revenue(&z, s.treatment).unwrap() - s.revenue).powi(2);
            let p = net.predict_propensity(&z);
            mean_p[0] += p[0] / test.len() as f64;
            mean_p[1] += p[1] / test.len() as f64;
        }
        let rmse = (sse / test.len() as f64).sqrt();
        assert!(rmse < 1.2 * 0.2, "rmse {rmse}");
        assert!((mean_p[0] - 0.5).abs() < 0.05 && (mean_p[1] - 0.5).abs() < 0.05);
    }

    #[test]
    fn monotonic_training_stays_monotone() {
        let ds = two_blob_dataset(400, 8);
        let cfg = RepNetConfig { head: HeadKind::Monotonic, d_z: 4, hidden: 8, head_hidden: 8, ..RepNetConfig::default() };
        let net = train_repnet(&ds, &cfg, &TrainConfig { epochs: 5, ..TrainConfig::default() }).unwrap().model;
        for s in two_blob_dataset(200, 9).samples() {
            let r = net.predict_all(&net.embed(&s.features).unwrap());
            assert!(r[1] >= r[0]);
        }
    }

    #[test]
    fn distillation_on_separated_blobs() {
        let ds = two_blob_dataset(1000, 10);
        let tc = TrainConfig { epochs: 10, ..TrainConfig::default() };
        let net = train_repnet(&ds, &RepNetConfig { d_z: 4, hidden: 8, ..RepNetConfig::default() }, &tc).unwrap().model;
        let z = net.embed_batch(&ds.features(), Exec::default()).unwrap();
        let km = kmeans_fit(&z, &KMeansConfig::new(2, 0)).unwrap();
        let clf = distill(&net, &km, &ds, &TrainConfig { epochs: 20, ..TrainConfig::default() }).unwrap().model;
        let test = two_blob_dataset(500, 11);
        let agree = test
            .samples()
            .iter()
            .filter(|s| clf.classify(&s.features) == km.assign(&net.embed(&s.features).unwrap()))
            .count();
        assert!(agree as f64 / 500.0 >= 0.9);
        // Predicted class shares track cluster sizes.
        let labels = km.assign_batch(&z, Exec::default());
        let pred = clf.classify_batch(&ds.features(), Exec::default());
        for c in 0..2 {
            let share = |v: &[usize]| v.iter().filter(|&&l| l == c).count() as f64 / v.len() as f64;
            assert!((share(&labels) - share(&pred)).abs() < 0.05);
        }
    }

    #[test]
    fn single_class_classifier() {
        let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let clf = train_classifier(&feats, &[0; 20], 1, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap().model;
        assert!(feats.iter().all(|x| clf.classify(x) == 0));
        assert!(train_classifier::<Vec<f64>>(&[], &[], 1, &TrainConfig::default()).is_err());
    }

    #[test]
    fn classify_shift_invariance() {
        let logits = [0.3, 2.0, -1.0, 2.0];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 17.5).collect();
        assert_eq!(argmax(&logits), argmax(&shifted));
        assert_eq!(argmax(&logits), 1);
    }

    #[test]
    fn checkpoints_record_head_kind() {
        let dir = tempfile::tempdir().unwrap();
        let ds = random_dataset(8, 3, 3, 12);
        for head in [HeadKind::Concat, HeadKind::Monotonic] {
            let net = random_net(head, 1, &ds);
            let p = dir.path().join(format!("{head}.json"));
            net.save(&p).unwrap();
            assert_eq!(nn::checkpoint_kind(&p).unwrap(), format!("repnet/{head}"));
            assert_eq!(RepNet::load(&p).unwrap(), net);
        }
    }
}
