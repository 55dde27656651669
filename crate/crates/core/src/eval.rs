//! Off-policy evaluation on randomized logs, budget sweeps and
//! cross-family comparison reports.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{lookup_strategy, AllocError, StrategyLibrary};
use crate::baselines::{heuristic_allocate, lagrangian_from_predictions, BaselineError, HeuristicPolicy, LagrangianPolicy, SLearner, TwoModel};
use crate::cluster::ClusterModel;
use crate::data::{Dataset, DatasetKind};
use crate::par::{self, Exec};
use crate::repnet::{DistilledClassifier, RepNet};

/// Deterministic map from features to an arm index.
pub trait Policy: Sync {
    fn treatment(&self, x: &[f64]) -> usize;
}

impl<F: Fn(&[f64]) -> usize + Sync> Policy for F {
    fn treatment(&self, x: &[f64]) -> usize {
        self(x)
    }
}

/// Always the same arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantPolicy(pub usize);

impl Policy for ConstantPolicy {
    fn treatment(&self, _: &[f64]) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("offline evaluation needs randomized (rct) logs")]
    NotRandomized,
    #[error("cannot evaluate on an empty dataset")]
    Empty,
    #[error("policy chose arm {arm} outside [0, {m})")]
    ArmOutOfRange { arm: usize, m: usize },
    #[error("no policy family to compare")]
    NoFamilies,
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
}

/// Estimator used by [`eom_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Per-arm matched-cohort means weighted by the policy's arm shares.
    #[default]
    Matched,
    /// Plain inverse-propensity weighting of matched samples.
    Ipw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EomEstimate {
    pub revenue_mean: f64,
    pub cost_mean: f64,
    pub revenue_se: f64,
    pub cost_se: f64,
    /// Samples whose logged arm equals the policy's choice.
    pub match_count: usize,
    /// Policy assignments per arm over all samples.
    pub arm_counts: Vec<usize>,
    /// Arms the policy uses that have no matched sample; excluded from the
    /// estimate.
    pub degenerate_arms: Vec<usize>,
}

impl EomEstimate {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_arms.is_empty()
    }
}

/// Matched-cohort estimate of a policy's mean revenue and cost per
/// individual.
pub fn eom<P: Policy + ?Sized>(dataset: &Dataset, policy: &P) -> Result<EomEstimate, EvalError> {
    eom_with(dataset, policy, Estimator::Matched)
}

pub fn eom_with<P: Policy + ?Sized>(dataset: &Dataset, policy: &P, estimator: Estimator) -> Result<EomEstimate, EvalError> {
    let arms = par::map(Exec::default(), dataset.samples(), |s| policy.treatment(&s.features));
    eom_from_arms(dataset, &arms, estimator)
}

/// [`eom_with`] given the policy's arm for every sample.
pub fn eom_from_arms(dataset: &Dataset, arms: &[usize], estimator: Estimator) -> Result<EomEstimate, EvalError> {
    if dataset.kind() != DatasetKind::Rct {
        return Err(EvalError::NotRandomized);
    }
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let m = dataset.num_treatments();
    if let Some(&arm) = arms.iter().find(|&&a| a >= m) {
        return Err(EvalError::ArmOutOfRange { arm, m });
    }
    let n = dataset.len();
    let nf = n as f64;
    let samples = dataset.samples();
    let mut arm_counts = vec![0usize; m];
    let mut matched = vec![0usize; m];
    let mut sum_r = vec![0.0; m];
    let mut sum_c = vec![0.0; m];
    for (s, &a) in samples.iter().zip(arms) {
        arm_counts[a] += 1;
        if s.treatment == a {
            matched[a] += 1;
            sum_r[a] += s.revenue;
            sum_c[a] += s.cost;
        }
    }
    let match_count = matched.iter().sum();
    let degenerate_arms: Vec<usize> = (0..m).filter(|&j| arm_counts[j] > 0 && matched[j] == 0).collect();

    let (revenue_mean, cost_mean, revenue_se, cost_se) = match estimator {
        Estimator::Matched => {
            let usable: usize = (0..m).filter(|&j| matched[j] > 0).map(|j| arm_counts[j]).sum();
            let total = usable.max(1) as f64;
            let mu_r: Vec<f64> = (0..m).map(|j| if matched[j] > 0 { sum_r[j] / matched[j] as f64 } else { 0.0 }).collect();
            let mu_c: Vec<f64> = (0..m).map(|j| if matched[j] > 0 { sum_c[j] / matched[j] as f64 } else { 0.0 }).collect();
            let v_r: f64 = (0..m).map(|j| arm_counts[j] as f64 / total * mu_r[j]).filter(|v| v.is_finite()).sum();
            let v_c: f64 = (0..m).map(|j| arm_counts[j] as f64 / total * mu_c[j]).filter(|v| v.is_finite()).sum();
            // Influence of sample i: the share term plus, for matched
            // samples, the cohort-mean term scaled by n_j / |C_j|.
            let (mut q_r, mut q_c) = (0.0, 0.0);
            for (s, &a) in samples.iter().zip(arms) {
                if matched[a] == 0 {
                    continue;
                }
                let mut psi_r = mu_r[a] - v_r;
                let mut psi_c = mu_c[a] - v_c;
                if s.treatment == a {
                    let w = arm_counts[a] as f64 / matched[a] as f64;
                    psi_r += w * (s.revenue - mu_r[a]);
                    psi_c += w * (s.cost - mu_c[a]);
                }
                q_r += psi_r * psi_r;
                q_c += psi_c * psi_c;
            }
            (v_r, v_c, q_r.sqrt() / total, q_c.sqrt() / total)
        }
        Estimator::Ipw => {
            let terms: Vec<(f64, f64)> = samples
                .iter()
                .zip(arms)
                .map(|(s, &a)| if s.treatment == a { (s.revenue / s.propensity, s.cost / s.propensity) } else { (0.0, 0.0) })
                .collect();
            let mr = terms.iter().map(|t| t.0).sum::<f64>() / nf;
            let mc = terms.iter().map(|t| t.1).sum::<f64>() / nf;
            let vr = terms.iter().map(|t| (t.0 - mr).powi(2)).sum::<f64>() / nf;
            let vc = terms.iter().map(|t| (t.1 - mc).powi(2)).sum::<f64>() / nf;
            (mr, mc, (vr / nf).sqrt(), (vc / nf).sqrt())
        }
    };
    Ok(EomEstimate { revenue_mean, cost_mean, revenue_se, cost_se, match_count, arm_counts, degenerate_arms })
}

/// Budget-indexed set of policies. Budgets are per individual.
pub trait PolicyFamily: Sync {
    fn policy(&self, budget: f64) -> Result<Box<dyn Policy + '_>, EvalError>;
}

/// Family that ignores the budget.
pub struct ConstantFamily(pub usize);

impl PolicyFamily for ConstantFamily {
    fn policy(&self, _: f64) -> Result<Box<dyn Policy + '_>, EvalError> {
        Ok(Box::new(ConstantPolicy(self.0)))
    }
}

/// Maps raw features to a cluster index.
pub trait Clusterer: Sync {
    fn cluster(&self, x: &[f64]) -> usize;
}

impl Clusterer for DistilledClassifier {
    fn cluster(&self, x: &[f64]) -> usize {
        self.classify(x)
    }
}

/// Nearest K-Means center of the representation, without distillation.
pub struct EmbedAssign<'a> {
    pub repnet: &'a RepNet,
    pub clusters: &'a ClusterModel,
}

impl Clusterer for EmbedAssign<'_> {
    fn cluster(&self, x: &[f64]) -> usize {
        let z = self.repnet.embed(x).expect("feature width matches the network");
        self.clusters.assign(&z)
    }
}

/// Per-cluster arm table applied through a clusterer.
pub struct ClusterPolicy<'a, C: Clusterer> {
    pub clusterer: &'a C,
    pub choice: Vec<usize>,
}

impl<C: Clusterer> Policy for ClusterPolicy<'_, C> {
    fn treatment(&self, x: &[f64]) -> usize {
        self.choice[self.clusterer.cluster(x)]
    }
}

/// Strategy-library lookup at `budget · population`, where `population`
/// is the number of individuals the library's cluster sizes count.
pub struct HrcFamily<'a, C: Clusterer> {
    pub clusterer: &'a C,
    pub library: &'a StrategyLibrary,
    pub population: usize,
}

impl<C: Clusterer> PolicyFamily for HrcFamily<'_, C> {
    fn policy(&self, budget: f64) -> Result<Box<dyn Policy + '_>, EvalError> {
        let entry = lookup_strategy(self.library, budget * self.population as f64)?;
        Ok(Box::new(ClusterPolicy { clusterer: self.clusterer, choice: entry.choice.clone() }))
    }
}

/// Greedy uplift search run on `features` at `budget · len(features)`,
/// replayed as a ratio threshold.
pub struct HeuristicFamily<'a> {
    pub model: &'a SLearner,
    pub features: Vec<Vec<f64>>,
    pub unit_costs: Vec<f64>,
}

impl PolicyFamily for HeuristicFamily<'_> {
    fn policy(&self, budget: f64) -> Result<Box<dyn Policy + '_>, EvalError> {
        let total = budget * self.features.len() as f64;
        let alloc = heuristic_allocate(self.model, &self.features, total, &self.unit_costs);
        Ok(Box::new(HeuristicPolicy { model: self.model, unit_costs: self.unit_costs.clone(), threshold: alloc.threshold }))
    }
}

/// Lagrangian multiplier found on `features` at `budget · len(features)`.
pub struct LagrangianFamily<'a> {
    model: &'a TwoModel,
    predictions: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<'a> LagrangianFamily<'a> {
    /// Predicts every row of `features` once; each budget reuses them.
    pub fn new<X: AsRef<[f64]> + Sync>(model: &'a TwoModel, features: &[X]) -> Self {
        let predictions = par::map(Exec::default(), features, |x| model.predict(x.as_ref()));
        LagrangianFamily { model, predictions }
    }

    /// Smallest per-capita budget the predicted costs can meet.
    pub fn min_budget(&self) -> f64 {
        let total: f64 = self.predictions.iter().map(|(_, c)| c.iter().copied().fold(f64::INFINITY, f64::min)).sum();
        total / self.predictions.len() as f64
    }
}

impl PolicyFamily for LagrangianFamily<'_> {
    fn policy(&self, budget: f64) -> Result<Box<dyn Policy + '_>, EvalError> {
        let total = budget * self.predictions.len() as f64;
        let alloc = lagrangian_from_predictions(&self.predictions, total)?;
        Ok(Box::new(LagrangianPolicy { model: self.model, lambda: alloc.lambda }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: f64,
    pub estimate: EomEstimate,
}

/// One estimate per budget, in grid order.
pub fn eom_curve(dataset: &Dataset, family: &dyn PolicyFamily, budgets: &[f64]) -> Result<Vec<CurvePoint>, EvalError> {
    budgets
        .iter()
        .map(|&budget| {
            let policy = family.policy(budget)?;
            Ok(CurvePoint { budget, estimate: eom(dataset, policy.as_ref())? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub family: String,
    pub budget: f64,
    pub revenue: f64,
    pub revenue_se: f64,
    pub cost: f64,
    pub cost_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Winner {
    pub budget: f64,
    pub family: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Highest revenue point estimate per budget; earlier family on ties.
    pub winners: Vec<Winner>,
}

impl Report {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn family_rows(&self, family: &str) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.family == family).collect()
    }
}

/// Sweeps every family over `budgets` and tabulates the estimates.
pub fn compare(families: &[(&str, &dyn PolicyFamily)], dataset: &Dataset, budgets: &[f64]) -> Result<Report, EvalError> {
    if families.is_empty() {
        return Err(EvalError::NoFamilies);
    }
    let mut rows = Vec::new();
    for (name, family) in families {
        for p in eom_curve(dataset, *family, budgets)? {
            rows.push(ReportRow {
                family: name.to_string(),
                budget: p.budget,
                revenue: p.estimate.revenue_mean,
                revenue_se: p.estimate.revenue_se,
                cost: p.estimate.cost_mean,
                cost_se: p.estimate.cost_se,
            });
        }
    }
    let winners = budgets
        .iter()
        .enumerate()
        .map(|(k, &budget)| {
            let best = (0..families.len())
                .max_by(|&a, &b| {
                    let (ra, rb) = (rows[a * budgets.len() + k].revenue, rows[b * budgets.len() + k].revenue);
                    ra.total_cmp(&rb).then(b.cmp(&a))
                })
                .expect("nonempty");
            Winner { budget, family: families[best].0.to_string() }
        })
        .collect();
    Ok(Report { rows, winners })
}

/// Piecewise-linear interpolation of revenue at `cost` along a curve of
/// `(cost, revenue)` points; `None` outside the curve's cost range.
pub fn revenue_at_cost(points: &[(f64, f64)], cost: f64) -> Option<f64> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (first, last) = (p.first()?, p.last()?);
    if cost < first.0 || cost > last.0 {
        return None;
    }
    for w in p.windows(2) {
        let ((c0, r0), (c1, r1)) = (w[0], w[1]);
        if cost >= c0 && cost <= c1 {
            if c1 - c0 <= 0.0 {
                return Some(r0.max(r1));
            }
            return Some(r0 + (r1 - r0) * (cost - c0) / (c1 - c0));
        }
    }
    Some(first.1)
}
