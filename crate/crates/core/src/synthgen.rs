//! Seeded synthetic RCT/OBS data with known ground truth.
//!
//! Each individual belongs to one of G latent groups. Features are the
//! group centroid (on a sphere of radius `group_radius`) plus isotropic unit
//! noise. Expected revenue and cost depend only on (group, arm), so the
//! value of any policy has an exact or Monte-Carlo ground truth.
//!
//! Revenue is `mean + N(0, noise_sigma²)`, replaced with probability
//! `contamination_rate` by a draw at `contamination_scale` times the noise
//! scale. Cost is zero-inflated: with probability `cost_event_rate` the
//! unit pays `mean / cost_event_rate`, otherwise nothing. That keeps cost
//! non-negative while reproducing the very large std/mean ratios of
//! production spend.
//!
//! Every sample draws from its own ChaCha stream (`stream = index`), so
//! generation is order-independent and parallel-safe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, DatasetKind, Sample, TreatmentSet};
use crate::eval::Policy;
use crate::nn::softmax;
use crate::par::{self, Exec};

const STRUCTURE_STREAM: u64 = u64::MAX;
const CENTROID_STREAM: u64 = u64::MAX - 1;
const MONTE_CARLO_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Expected outcomes per (latent group, arm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSurface {
    pub revenue: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n: usize,
    pub d: usize,
    pub groups: usize,
    pub treatment_values: Vec<f64>,
    #[serde(default = "default_radius")]
    pub group_radius: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "one")]
    pub cost_event_rate: f64,
    #[serde(default)]
    pub contamination_rate: f64,
    #[serde(default = "default_contamination_scale")]
    pub contamination_scale: f64,
    #[serde(default)]
    pub obs_bias: f64,
    #[serde(default)]
    pub seed: u64,
    /// Explicit surface; drawn from `seed` when absent.
    #[serde(default)]
    pub response: Option<ResponseSurface>,
}

fn default_radius() -> f64 {
    4.0
}
fn one() -> f64 {
    1.0
}
fn default_contamination_scale() -> f64 {
    10.0
}

/// Target moments (mean, std) of the pooled uniform-RCT population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub revenue: (f64, f64),
    pub cost: (f64, f64),
}

impl Moments {
    /// Cost and order-volume moments of the winter RCT training week.
    pub const WINTER_TRAIN: Moments = Moments { revenue: (0.851, 2.231), cost: (0.321, 3.639) };
    /// Summer RCT test week, for the distribution-shift config.
    pub const SUMMER_TEST: Moments = Moments { revenue: (0.928, 2.484), cost: (1.397, 7.613) };
}

/// Discount rates used as the six default treatments.
pub fn default_treatment_values() -> Vec<f64> {
    vec![0.05, 0.06, 0.07, 0.08, 0.09, 0.10]
}

impl GenConfig {
    pub fn new(n: usize, d: usize, groups: usize, treatment_values: Vec<f64>, seed: u64) -> Self {
        GenConfig {
            n,
            d,
            groups,
            treatment_values,
            group_radius: default_radius(),
            noise_sigma: 0.0,
            cost_event_rate: 1.0,
            contamination_rate: 0.0,
            contamination_scale: default_contamination_scale(),
            obs_bias: 0.0,
            seed,
            response: None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(format!("generator config: {m}")));
        TreatmentSet::from_values(self.treatment_values.clone())?;
        if self.d == 0 || self.groups == 0 {
            return bad("d and groups must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.group_radius >= 0.0) || !(self.obs_bias >= 0.0) {
            return bad("noise_sigma, group_radius and obs_bias must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.contamination_rate) {
            return bad(format!("contamination_rate {} outside [0, 1)", self.contamination_rate));
        }
        if !(self.cost_event_rate > 0.0 && self.cost_event_rate <= 1.0) {
            return bad(format!("cost_event_rate {} outside (0, 1]", self.cost_event_rate));
        }
        if let Some(s) = &self.response {
            let m = self.treatment_values.len();
            let shaped = |t: &Vec<Vec<f64>>| t.len() == self.groups && t.iter().all(|r| r.len() == m);
            if !shaped(&s.revenue) || !shaped(&s.cost) {
                return bad("response surface must be groups x treatments".into());
            }
            for g in 0..self.groups {
                if s.revenue[g].windows(2).any(|w| w[1] < w[0]) {
                    return bad(format!("revenue means of group {g} must be nondecreasing in arm"));
                }
                if s.cost[g].iter().any(|c| !(*c >= 0.0)) {
                    return bad(format!("cost means of group {g} must be >= 0"));
                }
            }
        }
        Ok(())
    }

    pub fn num_treatments(&self) -> usize {
        self.treatment_values.len()
    }

    pub fn treatment_set(&self) -> TreatmentSet {
        TreatmentSet::from_values(self.treatment_values.clone()).expect("validated treatment values")
    }

    /// The response surface, drawing a random monotone one when unset.
    ///
    /// Drawn surfaces give each group a base revenue, an uplift amplitude and
    /// a curvature, so groups differ in both level and marginal return of
    /// larger discounts. Expected cost is the discount rate times revenue.
    pub fn surface(&self) -> ResponseSurface {
        if let Some(s) = &self.response {
            return s.clone();
        }
        let mut rng = structure_rng(self.seed);
        let ts = self.treatment_set();
        let m = ts.count();
        let mut revenue = Vec::with_capacity(self.groups);
        let mut cost = Vec::with_capacity(self.groups);
        for _ in 0..self.groups {
            let base: f64 = rng.random_range(0.3..1.2);
            let uplift: f64 = rng.random_range(0.0..1.0f64).powi(2) * 1.5;
            let curvature: f64 = rng.random_range(0.5..2.0);
            let spend: f64 = rng.random_range(0.5..1.5);
            let r: Vec<f64> = (0..m).map(|j| base + uplift * ts.normalized(j).powf(curvature)).collect();
            let c = (0..m).map(|j| spend * ts.values()[j] * r[j] * 5.0).collect();
            revenue.push(r);
            cost.push(c);
        }
        ResponseSurface { revenue, cost }
    }

    /// Rescales the surface and sets `noise_sigma` / `cost_event_rate` so the
    /// uniform-RCT population, contamination included, matches `target`.
    /// Set `contamination_rate` and `contamination_scale` first.
    pub fn calibrated(mut self, target: Moments) -> Self {
        let s = self.surface();
        let cells = (self.groups * self.num_treatments()) as f64;
        let avg = |t: &Vec<Vec<f64>>| t.iter().flatten().sum::<f64>() / cells;
        let avg_sq = |t: &Vec<Vec<f64>>| t.iter().flatten().map(|v| v * v).sum::<f64>() / cells;

        let a = target.revenue.0 / avg(&s.revenue);
        let revenue: Vec<Vec<f64>> = s.revenue.iter().map(|r| r.iter().map(|v| v * a).collect()).collect();
        let between = avg_sq(&revenue) - target.revenue.0.powi(2);
        let rho = self.contamination_rate;
        let inflation = 1.0 - rho + rho * self.contamination_scale.powi(2);
        self.noise_sigma = ((target.revenue.1.powi(2) - between).max(0.0) / inflation).sqrt();

        let b = target.cost.0 / avg(&s.cost);
        let cost: Vec<Vec<f64>> = s.cost.iter().map(|r| r.iter().map(|v| v * b).collect()).collect();
        let second = avg_sq(&cost);
        self.cost_event_rate = (second / (target.cost.1.powi(2) + target.cost.0.powi(2))).clamp(1e-6, 1.0);
        self.response = Some(ResponseSurface { revenue, cost });
        self
    }
}

fn structure_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STRUCTURE_STREAM);
    rng
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// The generator's hidden truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Latent group of each generated sample.
    pub groups: Vec<usize>,
    pub group_probs: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
    pub revenue_means: Vec<Vec<f64>>,
    pub cost_means: Vec<Vec<f64>>,
    pub revenue_stds: Vec<Vec<f64>>,
    pub cost_stds: Vec<Vec<f64>>,
    /// Logging policy `P(arm | group)`.
    pub arm_probs: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn num_groups(&self) -> usize {
        self.revenue_means.len()
    }

    pub fn num_treatments(&self) -> usize {
        self.revenue_means[0].len()
    }

    /// Exact value of a policy that depends only on the latent group.
    pub fn group_policy_value(&self, arms: &[usize]) -> (f64, f64) {
        let mut rev = 0.0;
        let mut cost = 0.0;
        for (g, &a) in arms.iter().enumerate() {
            rev += self.group_probs[g] * self.revenue_means[g][a];
            cost += self.group_probs[g] * self.cost_means[g][a];
        }
        (rev, cost)
    }

    /// Per-group argmax of true expected revenue (ties to the lowest arm).
    pub fn oracle_arms(&self) -> Vec<usize> {
        self.revenue_means.iter().map(|r| crate::nn::argmax(r)).collect()
    }

    /// Group-level values over the pooled uniform-RCT population.
    pub fn mean_value(&self) -> f64 {
        let m = self.num_treatments() as f64;
        self.revenue_means.iter().zip(&self.group_probs).map(|(r, p)| p * r.iter().sum::<f64>() / m).sum()
    }
}

struct Structure {
    surface: ResponseSurface,
    centroids: Vec<Vec<f64>>,
    group_probs: Vec<f64>,
    arm_probs: Vec<Vec<f64>>,
}

fn structure(config: &GenConfig, obs: bool) -> Structure {
    let surface = config.surface();
    // Own stream, so centroids do not depend on whether the surface was explicit.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(CENTROID_STREAM);
    let centroids = (0..config.groups)
        .map(|_| {
            let v: Vec<f64> = (0..config.d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x * config.group_radius / norm).collect()
        })
        .collect();
    let g = config.groups;
    let m = config.num_treatments();
    let uniform = vec![1.0 / m as f64; m];
    let arm_probs = if obs && config.obs_bias > 0.0 {
        let ts = config.treatment_set();
        let value: Vec<f64> = surface.revenue.iter().map(|r| r.iter().sum::<f64>() / m as f64).collect();
        let mean = value.iter().sum::<f64>() / g as f64;
        let sd = (value.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        value
            .iter()
            .map(|v| {
                let affinity = if sd > 0.0 { (v - mean) / sd } else { 0.0 };
                let logits: Vec<f64> = (0..m).map(|j| config.obs_bias * affinity * ts.normalized(j)).collect();
                softmax(&logits)
            })
            .collect()
    } else {
        vec![uniform; g]
    };
    Structure { surface, centroids, group_probs: vec![1.0 / g as f64; g], arm_probs }
}

fn sample_features<R: Rng>(rng: &mut R, st: &Structure, config: &GenConfig) -> (usize, Vec<f64>) {
    let g = rng.random_range(0..config.groups);
    let x = st.centroids[g].iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)).collect();
    (g, x)
}

fn categorical(u: f64, probs: &[f64]) -> usize {
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

fn generate(config: &GenConfig, kind: DatasetKind, offset: usize, n: usize) -> Result<(Dataset, GroundTruth), DataError> {
    config.validate()?;
    let obs = kind == DatasetKind::Obs;
    let st = structure(config, obs);
    let m = config.num_treatments();
    let rows = par::map_range(Exec::default(), n, |i| {
        let mut rng = sample_rng(config.seed, offset + i);
        let (g, features) = sample_features(&mut rng, &st, config);
        let u: f64 = rng.random();
        let (treatment, propensity) = if obs {
            let j = categorical(u, &st.arm_probs[g]);
            (j, st.arm_probs[g][j])
        } else {
            (((u * m as f64) as usize).min(m - 1), 1.0 / m as f64)
        };
        let z: f64 = rng.sample(StandardNormal);
        let contaminated = rng.random::<f64>() < config.contamination_rate;
        let scale = if contaminated { config.contamination_scale } else { 1.0 };
        let revenue = st.surface.revenue[g][treatment] + config.noise_sigma * scale * z;
        let event = rng.random::<f64>() < config.cost_event_rate;
        let cost = if event { st.surface.cost[g][treatment] / config.cost_event_rate } else { 0.0 };
        (g, Sample { features, treatment, cost, revenue, propensity })
    });
    let (groups, samples): (Vec<usize>, Vec<Sample>) = rows.into_iter().unzip();
    let ds = Dataset::new(samples, kind, config.treatment_set(), config.d)?;

    let rho = config.contamination_rate;
    let noise_var = config.noise_sigma.powi(2) * (1.0 - rho + rho * config.contamination_scale.powi(2));
    let p = config.cost_event_rate;
    let gt = GroundTruth {
        groups,
        group_probs: st.group_probs,
        centroids: st.centroids,
        revenue_stds: st.surface.revenue.iter().map(|r| vec![noise_var.sqrt(); r.len()]).collect(),
        cost_stds: st.surface.cost.iter().map(|r| r.iter().map(|c| c * ((1.0 - p) / p).sqrt()).collect()).collect(),
        revenue_means: st.surface.revenue,
        cost_means: st.surface.cost,
        arm_probs: st.arm_probs,
    };
    Ok((ds, gt))
}

/// Uniformly randomized treatments with propensity 1/M.
pub fn generate_rct(config: &GenConfig) -> Result<(Dataset, GroundTruth), DataError> {
    generate(config, DatasetKind::Rct, 0, config.n)
}

/// A randomized hold-out of `n` individuals from the same population,
/// disjoint from (and independent of) the `config.n` training samples.
pub fn generate_holdout(config: &GenConfig, n: usize) -> Result<(Dataset, GroundTruth), DataError> {
    generate(config, DatasetKind::Rct, config.n, n)
}

/// Confounded logging: `P(arm | group) = softmax(obs_bias * affinity_g * t_norm)`
/// where the affinity is the standardized mean revenue of the group, so
/// higher-value groups over-receive larger treatments.
pub fn generate_obs(config: &GenConfig) -> Result<(Dataset, GroundTruth), DataError> {
    generate(config, DatasetKind::Obs, 0, config.n)
}

/// True expected revenue and cost of a policy, with Monte-Carlo standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub revenue: f64,
    pub cost: f64,
    pub revenue_se: f64,
    pub cost_se: f64,
}

/// Draws `n` fresh individuals (latent group, features) independent of the
/// generated datasets.
pub fn sample_population(config: &GenConfig, n: usize) -> Vec<(usize, Vec<f64>)> {
    let st = structure(config, false);
    let seed = config.seed ^ MONTE_CARLO_SALT;
    par::map_range(Exec::default(), n, |i| sample_features(&mut sample_rng(seed, i), &st, config))
}

/// Value of an arbitrary feature-based policy. The outcome noise integrates
/// out exactly (expected cell means); only the population is sampled, over
/// `n_mc` fresh individuals.
pub fn true_policy_value<P: Policy + ?Sized>(config: &GenConfig, truth: &GroundTruth, policy: &P, n_mc: usize) -> PolicyValue {
    let pop = sample_population(config, n_mc);
    let vals = par::map(Exec::default(), &pop, |(g, x)| {
        let a = policy.treatment(x);
        (truth.revenue_means[*g][a], truth.cost_means[*g][a])
    });
    let n = vals.len().max(1) as f64;
    let (rm, cm) = vals.iter().fold((0.0, 0.0), |(r, c), v| (r + v.0, c + v.1));
    let (rm, cm) = (rm / n, cm / n);
    let (rv, cv) = vals.iter().fold((0.0, 0.0), |(r, c), v| (r + (v.0 - rm).powi(2), c + (v.1 - cm).powi(2)));
    PolicyValue { revenue: rm, cost: cm, revenue_se: (rv / n).sqrt() / n.sqrt(), cost_se: (cv / n).sqrt() / n.sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(n: usize) -> GenConfig {
        GenConfig::new(n, 5, 6, default_treatment_values(), 17)
    }

    #[test]
    fn noiseless_outcomes_equal_cell_means() {
        let (ds, gt) = generate_rct(&base(500)).unwrap();
        for (s, &g) in ds.samples().iter().zip(&gt.groups) {
            assert_eq!(s.revenue, gt.revenue_means[g][s.treatment]);
            assert_eq!(s.cost, gt.cost_means[g][s.treatment]);
        }
    }

    #[test]
    fn calibration_matches_target_moments() {
        let moments = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
        };
        let t = Moments::WINTER_TRAIN;
        for rho in [0.0, 0.2] {
            let c = GenConfig { contamination_rate: rho, ..base(400_000) }.calibrated(t);
            let (ds, _) = generate_rct(&c).unwrap();
            let (rm, rs) = moments(&ds.samples().iter().map(|s| s.revenue).collect::<Vec<_>>());
            let (cm, cs) = moments(&ds.samples().iter().map(|s| s.cost).collect::<Vec<_>>());
            assert!((rm - t.revenue.0).abs() < 0.05 && (rs / t.revenue.1 - 1.0).abs() < 0.05, "rho {rho}: revenue {rm} {rs}");
            assert!((cm - t.cost.0).abs() < 0.05 && (cs / t.cost.1 - 1.0).abs() < 0.05, "rho {rho}: cost {cm} {cs}");
        }
    }

    #[test]
    fn deterministic_and_parallel_safe() {
        let mut c = base(2000);
        c.noise_sigma = 1.0;
        c.contamination_rate = 0.1;
        let (a, _) = generate_rct(&c).unwrap();
        let (b, _) = generate_rct(&c).unwrap();
        assert_eq!(a, b);
        // A prefix of a larger run is the smaller run.
        c.n = 3000;
        let (big, _) = generate_rct(&c).unwrap();
        assert_eq!(&big.samples()[..2000], a.samples());
    }

    #[test]
    fn surface_is_monotone_in_arm() {
        let s = base(1).surface();
        for r in &s.revenue {
            assert!(r.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn zero_bias_obs_is_uniform() {
        let mut c = base(60_000);
        c.obs_bias = 0.0;
        let (ds, _) = generate_obs(&c).unwrap();
        let m = c.num_treatments();
        for n in ds.arm_counts() {
            assert!((n as f64 / 60_000.0 - 1.0 / m as f64).abs() < 0.01);
        }
        assert!(ds.samples().iter().all(|s| (s.propensity - 1.0 / m as f64).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = base(10);
        c.contamination_rate = 1.0;
        assert!(generate_rct(&c).is_err());
        let mut c = base(10);
        c.cost_event_rate = 0.0;
        assert!(generate_rct(&c).is_err());
    }

    #[test]
    fn constant_policy_value_is_closed_form() {
        let c = base(10);
        let (_, gt) = generate_rct(&c).unwrap();
        for j in 0..c.num_treatments() {
            let exact: f64 = (0..c.groups).map(|g| gt.group_probs[g] * gt.revenue_means[g][j]).sum();
            assert!((gt.group_policy_value(&vec![j; c.groups]).0 - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_is_max_arm_under_monotone_truth() {
        let (_, gt) = generate_rct(&base(10)).unwrap();
        let m = gt.num_treatments();
        for (g, a) in gt.oracle_arms().into_iter().enumerate() {
            assert_eq!(gt.revenue_means[g][a], gt.revenue_means[g][m - 1]);
        }
    }

    #[test]
    fn holdout_shares_population_but_not_samples() {
        let cfg = base(300);
        let (train, gt) = generate_obs(&GenConfig { obs_bias: 2.0, ..cfg.clone() }).unwrap();
        let (test, ht) = generate_holdout(&cfg, 200).unwrap();
        assert_eq!(test.len(), 200);
        assert_eq!(test.kind(), DatasetKind::Rct);
        assert_eq!((gt.revenue_means.clone(), gt.centroids.clone()), (ht.revenue_means, ht.centroids));
        assert!(train.samples().iter().all(|s| test.samples().iter().all(|t| t.features != s.features)));
        let (longer, _) = generate_rct(&GenConfig { n: 500, ..cfg.clone() }).unwrap();
        assert_eq!(&longer.samples()[300..], test.samples());
    }
}
