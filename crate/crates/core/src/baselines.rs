//! Individual-level comparison allocators: S-learner with greedy uplift
//! search, a two-model revenue/cost predictor with a Lagrangian allocator,
//! and decision-focused training of the same two-model architecture.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Assignment, Dataset};
use crate::eval::Policy;
use crate::nn::{self, argmax, softmax, Activation, Mlp, NetError, Objective, Parametric, Standardizer, TrainConfig, Trained};
use crate::par::{self, Exec};

const SLEARNER_KIND: &str = "slearner";
const TWO_MODEL_KIND: &str = "two_model";
const MAX_BISECTION: usize = 200;
/// Relative distance to the budget at which bisection stops.
pub const BUDGET_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("budget {budget} is below the cheapest predicted allocation {min_cost}")]
    Infeasible { budget: f64, min_cost: f64 },
    #[error("invalid baseline config: {0}")]
    Config(String),
}

/// Hidden widths of the baseline networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub hidden: Vec<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { hidden: vec![64, 32] }
    }
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut s) = (0usize, 0.0);
    for v in values {
        n += 1;
        s += v * v;
    }
    let ms = s / n.max(1) as f64;
    if ms > 0.0 { ms.sqrt() } else { 1.0 }
}

fn fit_standardizer(dataset: &Dataset) -> Standardizer {
    Standardizer::fit(dataset.samples().iter().map(|s| s.features.as_slice()), dataset.feature_dim())
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Single network over `[x ‖ onehot(t)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SLearner {
    standardizer: Standardizer,
    net: Mlp,
    m: usize,
    revenue_scale: f64,
}

impl SLearner {
    fn input(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut v = self.standardizer.apply(x);
        v.extend((0..self.m).map(|j| if j == t { 1.0 } else { 0.0 }));
        v
    }

    pub fn num_treatments(&self) -> usize {
        self.m
    }

    pub fn predict(&self, x: &[f64], t: usize) -> f64 {
        self.revenue_scale * self.net.forward(&self.input(x, t))[0]
    }

    pub fn predict_all(&self, x: &[f64]) -> Vec<f64> {
        (0..self.m).map(|t| self.predict(x, t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        nn::save_checkpoint(path, SLEARNER_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        nn::load_checkpoint(path, SLEARNER_KIND)
    }
}

impl Parametric for SLearner {
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

/// Squared error of the logged arm's prediction, in scaled units.
pub struct SLearnerObjective {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl SLearnerObjective {
    pub fn new(model: &SLearner, dataset: &Dataset) -> Self {
        let s = dataset.samples();
        SLearnerObjective {
            inputs: s.iter().map(|s| model.input(&s.features, s.treatment)).collect(),
            targets: s.iter().map(|s| s.revenue / model.revenue_scale).collect(),
        }
    }
}

impl Objective<SLearner> for SLearnerObjective {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn sample_loss(&self, model: &SLearner, i: usize, grad: Option<&mut [f64]>) -> f64 {
        let y = self.targets[i];
        match grad {
            None => (model.net.forward(&self.inputs[i])[0] - y).powi(2),
            Some(g) => {
                let trace = model.net.forward_trace(&self.inputs[i]);
                let e = trace.output()[0] - y;
                model.net.backward(&trace, &[2.0 * e], g);
                e * e
            }
        }
    }
}

/// Squared-error fit of logged `(x, t, r)` triples.
pub fn train_slearner(dataset: &Dataset, config: &BaselineConfig, train: &TrainConfig) -> Result<Trained<SLearner>, NetError> {
    let m = dataset.num_treatments();
    let mut rng = init_rng(train.seed, 3);
    let net = Mlp::new(&dims(dataset.feature_dim() + m, &config.hidden, 1), Activation::Tanh, Activation::Identity, &mut rng);
    let model = SLearner {
        standardizer: fit_standardizer(dataset),
        net,
        m,
        revenue_scale: rms(dataset.samples().iter().map(|s| s.revenue)),
    };
    let obj = SLearnerObjective::new(&model, dataset);
    nn::train(model, &obj, train)
}

/// Best-uplift arm and its uplift per unit of extra cost over control.
fn upgrade_key(model: &SLearner, x: &[f64], unit_costs: &[f64]) -> (usize, f64) {
    let r = model.predict_all(x);
    let uplift: Vec<f64> = r.iter().map(|v| v - r[0]).collect();
    let arm = argmax(&uplift);
    if arm == 0 {
        return (0, f64::NEG_INFINITY);
    }
    let extra = unit_costs[arm] - unit_costs[0];
    let key = if extra > 0.0 { uplift[arm] / extra } else { f64::INFINITY };
    (arm, key)
}

/// Result of [`heuristic_allocate`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicAllocation {
    pub assignment: Assignment,
    /// Smallest ratio among upgraded individuals (`+inf` when none).
    pub threshold: f64,
}

/// Ranks individuals by best uplift per extra unit cost and upgrades them
/// from control, in rank order, until the next upgrade would exceed the
/// budget. Ties in rank go to the lower index.
pub fn heuristic_allocate<X: AsRef<[f64]> + Sync>(model: &SLearner, features: &[X], budget: f64, unit_costs: &[f64]) -> HeuristicAllocation {
    let keys = par::map(Exec::default(), features, |x| upgrade_key(model, x.as_ref(), unit_costs));
    let mut order: Vec<usize> = (0..features.len()).filter(|&i| keys[i].0 != 0).collect();
    order.sort_by(|&a, &b| keys[b].1.total_cmp(&keys[a].1).then(a.cmp(&b)));
    let mut choice = vec![0; features.len()];
    let mut spent = unit_costs[0] * features.len() as f64;
    let mut threshold = f64::INFINITY;
    for i in order {
        let (arm, key) = keys[i];
        let next = spent + unit_costs[arm] - unit_costs[0];
        if next > budget {
            break;
        }
        spent = next;
        choice[i] = arm;
        threshold = key;
    }
    let expected_revenue = features.iter().zip(&choice).map(|(x, &t)| model.predict(x.as_ref(), t)).sum();
    HeuristicAllocation {
        assignment: Assignment { choice, expected_revenue, expected_cost: spent },
        threshold,
    }
}

/// Fixed-proportion form: individuals sorted by best uplift (descending)
/// are split into consecutive groups of `proportions[j] · N`, the top group
/// receiving the highest arm and the last group control.
pub fn heuristic_proportions<X: AsRef<[f64]> + Sync>(model: &SLearner, features: &[X], proportions: &[f64]) -> Result<Vec<usize>, BaselineError> {
    let m = model.num_treatments();
    if proportions.len() != m || proportions.iter().any(|p| !(*p >= 0.0)) || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(BaselineError::Config(format!("need {m} nonnegative proportions summing to 1")));
    }
    let best = par::map(Exec::default(), features, |x| {
        let r = model.predict_all(x.as_ref());
        r.iter().map(|v| v - r[0]).fold(f64::NEG_INFINITY, f64::max)
    });
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    let n = features.len();
    let mut choice = vec![0; n];
    let mut start = 0usize;
    let mut cum = 0.0;
    for arm in (0..m).rev() {
        cum += proportions[arm];
        let end = if arm == 0 { n } else { ((cum * n as f64).round() as usize).min(n) };
        for &i in &order[start..end.max(start)] {
            choice[i] = arm;
        }
        start = end.max(start);
    }
    Ok(choice)
}

/// Threshold policy reproducing a heuristic allocation on new individuals.
#[derive(Debug, Clone)]
pub struct HeuristicPolicy<'a> {
    pub model: &'a SLearner,
    pub unit_costs: Vec<f64>,
    pub threshold: f64,
}

impl Policy for HeuristicPolicy<'_> {
    fn treatment(&self, x: &[f64]) -> usize {
        let (arm, key) = upgrade_key(self.model, x, &self.unit_costs);
        if arm != 0 && key >= self.threshold { arm } else { 0 }
    }
}

/// Separate revenue and cost networks, each predicting all arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoModel {
    standardizer: Standardizer,
    revenue_net: Mlp,
    cost_net: Mlp,
    revenue_scale: f64,
    cost_scale: f64,
}

impl TwoModel {
    pub fn new(dataset: &Dataset, config: &BaselineConfig, seed: u64) -> Self {
        let m = dataset.num_treatments();
        let d = dataset.feature_dim();
        let mut rng = init_rng(seed, 4);
        TwoModel {
            standardizer: fit_standardizer(dataset),
            revenue_net: Mlp::new(&dims(d, &config.hidden, m), Activation::Tanh, Activation::Identity, &mut rng),
            cost_net: Mlp::new(&dims(d, &config.hidden, m), Activation::Tanh, Activation::Identity, &mut rng),
            revenue_scale: rms(dataset.samples().iter().map(|s| s.revenue)),
            cost_scale: rms(dataset.samples().iter().map(|s| s.cost)),
        }
    }

    pub fn num_treatments(&self) -> usize {
        self.revenue_net.output_dim()
    }

    /// Predicted `(revenue, cost)` of every arm.
    pub fn predict(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z = self.standardizer.apply(x);
        let r = self.revenue_net.forward(&z).into_iter().map(|v| v * self.revenue_scale).collect();
        let c = self.cost_net.forward(&z).into_iter().map(|v| v * self.cost_scale).collect();
        (r, c)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        nn::save_checkpoint(path, TWO_MODEL_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        nn::load_checkpoint(path, TWO_MODEL_KIND)
    }
}

impl Parametric for TwoModel {
    fn num_params(&self) -> usize {
        self.revenue_net.num_params() + self.cost_net.num_params()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.revenue_net.params();
        p.extend(self.cost_net.params());
        p
    }

    fn set_params(&mut self, p: &[f64]) -> usize {
        let n = self.revenue_net.set_params(p);
        n + self.cost_net.set_params(&p[n..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DflConfig {
    pub lambda_list: Vec<f64>,
    pub temperature: f64,
    #[serde(default = "unit")]
    pub theta_d: f64,
    #[serde(default = "unit")]
    pub theta_r: f64,
    #[serde(default = "unit")]
    pub theta_c: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for DflConfig {
    fn default() -> Self {
        DflConfig { lambda_list: vec![0.5, 1.0, 2.0], temperature: 0.5, theta_d: 1.0, theta_r: 1.0, theta_c: 1.0 }
    }
}

impl DflConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.lambda_list.is_empty() || self.lambda_list.iter().any(|l| !l.is_finite()) {
            return Err(BaselineError::Config("lambda_list must be nonempty and finite".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BaselineError::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if [self.theta_d, self.theta_r, self.theta_c].iter().any(|t| !(*t >= 0.0)) {
            return Err(BaselineError::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }

    /// Multiplier used for fixed-λ inference: the middle of the list.
    pub fn mid_lambda(&self) -> f64 {
        let mut l = self.lambda_list.clone();
        l.sort_by(f64::total_cmp);
        l[l.len() / 2]
    }
}

/// Masked two-model loss, optionally with the decision term.
///
/// All terms work in scaled units: revenue over the revenue RMS and cost
/// over the cost RMS. Utilities `r − λc` are measured in revenue units.
pub struct TwoModelObjective {
    inputs: Vec<Vec<f64>>,
    arms: Vec<usize>,
    revenue: Vec<f64>,
    cost: Vec<f64>,
    dfl: Option<DflConfig>,
    /// Cost scale over revenue scale.
    ratio: f64,
}

impl TwoModelObjective {
    pub fn new(model: &TwoModel, dataset: &Dataset, dfl: Option<DflConfig>) -> Self {
        let s = dataset.samples();
        TwoModelObjective {
            inputs: s.iter().map(|s| model.standardizer.apply(&s.features)).collect(),
            arms: s.iter().map(|s| s.treatment).collect(),
            revenue: s.iter().map(|s| s.revenue / model.revenue_scale).collect(),
            cost: s.iter().map(|s| s.cost / model.cost_scale).collect(),
            dfl,
            ratio: model.cost_scale / model.revenue_scale,
        }
    }

    /// Loss of sample `i` and its gradient with respect to both output
    /// vectors (scaled units).
    pub fn output_grads(&self, i: usize, r_hat: &[f64], c_hat: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let m = r_hat.len();
        let mf = m as f64;
        let t = self.arms[i];
        let (r, c) = (self.revenue[i], self.cost[i]);
        let mut d_r = vec![0.0; m];
        let mut d_c = vec![0.0; m];
        let (er, ec) = (r_hat[t] - r, c_hat[t] - c);
        match &self.dfl {
            None => {
                d_r[t] = 2.0 * er / mf;
                d_c[t] = 2.0 * ec / mf;
                ((er * er + ec * ec) / mf, d_r, d_c)
            }
            Some(cfg) => {
                let mut loss = cfg.theta_r * er * er + cfg.theta_c * ec * ec;
                d_r[t] = 2.0 * cfg.theta_r * er;
                d_c[t] = 2.0 * cfg.theta_c * ec;
                for &lambda in &cfg.lambda_list {
                    let lr = lambda * self.ratio;
                    let u_hat: Vec<f64> = (0..m).map(|j| (r_hat[j] - lr * c_hat[j]) / cfg.temperature).collect();
                    let q = softmax(&u_hat);
                    let u = r - lr * c;
                    loss -= cfg.theta_d * mf * q[t] * u;
                    // d q_t / d û_j = q_t (δ_tj − q_j) / τ
                    let scale = -cfg.theta_d * mf * u * q[t] / cfg.temperature;
                    for j in 0..m {
                        let dq = if j == t { 1.0 - q[j] } else { -q[j] };
                        d_r[j] += scale * dq;
                        d_c[j] -= scale * dq * lr;
                    }
                }
                (loss, d_r, d_c)
            }
        }
    }
}

impl Objective<TwoModel> for TwoModelObjective {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn sample_loss(&self, model: &TwoModel, i: usize, grad: Option<&mut [f64]>) -> f64 {
        let x = &self.inputs[i];
        match grad {
            None => self.output_grads(i, &model.revenue_net.forward(x), &model.cost_net.forward(x)).0,
            Some(g) => {
                let tr = model.revenue_net.forward_trace(x);
                let tc = model.cost_net.forward_trace(x);
                let (loss, d_r, d_c) = self.output_grads(i, tr.output(), tc.output());
                let (gr, gc) = g.split_at_mut(model.revenue_net.num_params());
                model.revenue_net.backward(&tr, &d_r, gr);
                model.cost_net.backward(&tc, &d_c, gc);
                loss
            }
        }
    }
}

/// Masked squared errors: only the logged arm's outputs receive gradient.
pub fn train_two_model(dataset: &Dataset, config: &BaselineConfig, train: &TrainConfig) -> Result<Trained<TwoModel>, NetError> {
    let model = TwoModel::new(dataset, config, train.seed);
    let obj = TwoModelObjective::new(&model, dataset, None);
    nn::train(model, &obj, train)
}

/// Decision-focused training: `−θ_d·L_d + θ_r·L_r + θ_c·L_c` with the
/// softmax-relaxed decision term summed over `lambda_list`.
pub fn train_dfl(dataset: &Dataset, dfl: &DflConfig, config: &BaselineConfig, train: &TrainConfig) -> Result<Trained<TwoModel>, BaselineError> {
    dfl.validate()?;
    let model = TwoModel::new(dataset, config, train.seed);
    let obj = TwoModelObjective::new(&model, dataset, Some(dfl.clone()));
    Ok(nn::train(model, &obj, train)?)
}

/// Per-individual argmax of `r̂ − λĉ`, lowest arm on ties.
fn penalized(preds: &[(Vec<f64>, Vec<f64>)], lambda: f64) -> (Vec<usize>, f64) {
    let mut cost = 0.0;
    let choice = preds
        .iter()
        .map(|(r, c)| {
            let u: Vec<f64> = r.iter().zip(c).map(|(r, c)| r - lambda * c).collect();
            let j = argmax(&u);
            cost += c[j];
            j
        })
        .collect();
    (choice, cost)
}

/// Result of [`lagrangian_allocate`].
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianAllocation {
    pub assignment: Assignment,
    pub lambda: f64,
    /// `(λ, predicted cost)` at every visited multiplier.
    pub trace: Vec<(f64, f64)>,
}

/// Bisection on λ ≥ 0 until the predicted cost of per-individual
/// `argmax(r̂ − λĉ)` is within [`BUDGET_TOLERANCE`] of the budget from
/// below, or the bracket collapses.
pub fn lagrangian_allocate<X: AsRef<[f64]> + Sync>(model: &TwoModel, features: &[X], budget: f64) -> Result<LagrangianAllocation, BaselineError> {
    let preds = par::map(Exec::default(), features, |x| model.predict(x.as_ref()));
    lagrangian_from_predictions(&preds, budget)
}

/// [`lagrangian_allocate`] on precomputed `(revenue, cost)` predictions.
pub fn lagrangian_from_predictions(preds: &[(Vec<f64>, Vec<f64>)], budget: f64) -> Result<LagrangianAllocation, BaselineError> {
    let min_cost: f64 = preds.iter().map(|(_, c)| c.iter().copied().fold(f64::INFINITY, f64::min)).sum();
    if budget < min_cost {
        return Err(BaselineError::Infeasible { budget, min_cost });
    }
    let mut trace = Vec::new();
    let mut eval = |lambda: f64| {
        let (choice, cost) = penalized(preds, lambda);
        trace.push((lambda, cost));
        (choice, cost)
    };
    let finish = |choice: Vec<usize>, cost: f64, lambda: f64, trace: Vec<(f64, f64)>| {
        let expected_revenue = preds.iter().zip(&choice).map(|((r, _), &j)| r[j]).sum();
        LagrangianAllocation { assignment: Assignment { choice, expected_revenue, expected_cost: cost }, lambda, trace }
    };
    let (choice, cost) = eval(0.0);
    if cost <= budget {
        return Ok(finish(choice, cost, 0.0, trace));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut best = loop {
        let (choice, cost) = eval(hi);
        if cost <= budget {
            break (choice, cost);
        }
        lo = hi;
        hi *= 2.0;
        if hi > 1e18 {
            // Only near-exact ties with the all-cheapest cost end up here.
            let choice: Vec<usize> = preds
                .iter()
                .map(|(_, c)| (1..c.len()).fold(0, |b, j| if c[j] < c[b] { j } else { b }))
                .collect();
            let cost = preds.iter().zip(&choice).map(|((_, c), &j)| c[j]).sum();
            return Ok(finish(choice, cost, f64::INFINITY, trace));
        }
    };
    for _ in 0..MAX_BISECTION {
        if best.1 >= budget * (1.0 - BUDGET_TOLERANCE) || hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let (choice, cost) = eval(mid);
        if cost <= budget {
            hi = mid;
            best = (choice, cost);
        } else {
            lo = mid;
        }
    }
    let (choice, cost) = best;
    Ok(finish(choice, cost, hi, trace))
}

/// `argmax(r̂ − λĉ)` at a fixed multiplier.
#[derive(Debug, Clone)]
pub struct LagrangianPolicy<'a> {
    pub model: &'a TwoModel,
    pub lambda: f64,
}

impl Policy for LagrangianPolicy<'_> {
    fn treatment(&self, x: &[f64]) -> usize {
        let (r, c) = self.model.predict(x);
        let u: Vec<f64> = r.iter().zip(&c).map(|(r, c)| r - self.lambda * c).collect();
        argmax(&u)
    }
}
