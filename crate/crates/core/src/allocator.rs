//! Budget-constrained treatment allocation over clusters: a variance-averse
//! multiple-choice knapsack, an individual-level exact oracle, and the
//! budget-indexed strategy library served at request time.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::ClusterStats;
use crate::data::Assignment;
use crate::par::{self, Exec};

/// Cost steps per unit of budget used by the knapsack DP.
pub const DP_STEPS: usize = 100_000;
/// Largest DP choice table (bytes) the individual-level oracle will allocate.
pub const MAX_DP_CELLS: usize = 200_000_000;
/// Largest enumeration the brute-force solver accepts.
pub const MAX_BRUTE_FORCE: u64 = 20_000_000;
const BISECTION_ITERS: usize = 64;
const MAX_EXCHANGE_ROUNDS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum AllocError {
    #[error("budget {budget} is infeasible; the minimum feasible budget is {min_budget}")]
    Infeasible { budget: f64, min_budget: f64 },
    #[error("invalid problem shape: {0}")]
    Shape(String),
    #[error("invalid solver config: {0}")]
    Config(String),
    #[error("brute force over {size} assignments exceeds the limit of {limit}")]
    TooLarge { size: u64, limit: u64 },
    #[error("DP table of {cells} cells exceeds the memory limit of {limit}")]
    MemoryBound { cells: usize, limit: usize },
    #[error("budget {budget} is below the smallest library entry {min}")]
    BelowLibrary { budget: f64, min: f64 },
    #[error("strategy library is empty")]
    EmptyLibrary,
    #[error("solver returned an invalid assignment: {0}")]
    PostCheck(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactDp,
    LagrangianSweep,
    BruteForce,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::ExactDp => "exact_dp",
            Method::LagrangianSweep => "lagrangian_sweep",
            Method::BruteForce => "brute_force",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_aversion")]
    pub lambda: f64,
    #[serde(default = "default_aversion")]
    pub kappa: f64,
    pub budget_grid: Vec<f64>,
    #[serde(default = "default_method")]
    pub method: Method,
}

fn default_aversion() -> f64 {
    0.1
}
fn default_method() -> Method {
    Method::ExactDp
}

impl SolverConfig {
    pub fn new(budget_grid: Vec<f64>) -> Self {
        SolverConfig { lambda: default_aversion(), kappa: default_aversion(), budget_grid, method: default_method() }
    }

    pub fn validate(&self) -> Result<(), AllocError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(AllocError::Config(format!("lambda={} kappa={} must be finite and >= 0", self.lambda, self.kappa)));
        }
        if self.budget_grid.is_empty() {
            return Err(AllocError::Config("budget_grid is empty".into()));
        }
        if self.budget_grid.iter().any(|&b| !(b > 0.0)) {
            return Err(AllocError::Config("budget_grid entries must be > 0".into()));
        }
        if self.budget_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AllocError::Config("budget_grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Per-cluster objective and cost coefficients of the stochastic program.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `ω_i (μ_r − λ σ_r − κ σ_c)`.
    pub scores: Vec<Vec<f64>>,
    /// `ω_i μ_c`.
    pub costs: Vec<Vec<f64>>,
    /// `ω_i μ_r`.
    pub revenues: Vec<Vec<f64>>,
    /// `ω_i σ_r`.
    pub revenue_spread: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn k(&self) -> usize {
        self.scores.len()
    }

    pub fn m(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn objective(&self, choice: &[usize]) -> f64 {
        choice.iter().enumerate().map(|(i, &j)| self.scores[i][j]).sum()
    }

    pub fn assignment(&self, choice: Vec<usize>) -> Assignment {
        let expected_revenue = choice.iter().enumerate().map(|(i, &j)| self.revenues[i][j]).sum();
        let expected_cost = choice.iter().enumerate().map(|(i, &j)| self.costs[i][j]).sum();
        Assignment { choice, expected_revenue, expected_cost }
    }

    pub fn revenue_spread_of(&self, choice: &[usize]) -> f64 {
        choice.iter().enumerate().map(|(i, &j)| self.revenue_spread[i][j]).sum()
    }
}

pub fn score_matrix(stats: &ClusterStats, lambda: f64, kappa: f64) -> ScoreMatrix {
    let rows = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..stats.k).map(|i| (0..stats.m).map(|j| f(i, j)).collect()).collect()
    };
    let w = |i: usize| stats.sizes[i] as f64;
    ScoreMatrix {
        scores: rows(&|i, j| {
            let c = stats.cell(i, j);
            w(i) * (c.revenue_mean - lambda * c.revenue_std - kappa * c.cost_std)
        }),
        costs: rows(&|i, j| w(i) * stats.cell(i, j).cost_mean),
        revenues: rows(&|i, j| w(i) * stats.cell(i, j).revenue_mean),
        revenue_spread: rows(&|i, j| w(i) * stats.cell(i, j).revenue_std),
    }
}

/// Result of one solve with method-specific diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub assignment: Assignment,
    /// Objective value of the returned choice.
    pub objective: f64,
    /// Lagrangian dual upper bound (lagrangian_sweep only).
    pub dual_bound: Option<f64>,
    /// `dual_bound − objective` (lagrangian_sweep only).
    pub gap: Option<f64>,
    /// Cost discretization step (DP only).
    pub resolution: Option<f64>,
    /// Worst-case cost slack lost to discretization, `groups × resolution`.
    pub error_bound: Option<f64>,
}

fn check_shape(scores: &[Vec<f64>], costs: &[Vec<f64>]) -> Result<usize, AllocError> {
    if scores.is_empty() {
        return Err(AllocError::Shape("no groups".into()));
    }
    if scores.len() != costs.len() {
        return Err(AllocError::Shape(format!("{} score rows vs {} cost rows", scores.len(), costs.len())));
    }
    let m = scores[0].len();
    if m == 0 || m > u8::MAX as usize + 1 {
        return Err(AllocError::Shape(format!("{m} options per group")));
    }
    for (s, c) in scores.iter().zip(costs) {
        if s.len() != m || c.len() != m {
            return Err(AllocError::Shape("ragged rows".into()));
        }
        if s.iter().chain(c).any(|v| !v.is_finite()) {
            return Err(AllocError::Shape("non-finite coefficient".into()));
        }
    }
    Ok(m)
}

fn row_min(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Smallest budget admitting a one-per-group selection.
pub fn min_feasible_budget(costs: &[Vec<f64>]) -> f64 {
    costs.iter().map(|r| row_min(r)).sum()
}

fn budget_tolerance(budget: f64) -> f64 {
    1e-12 * budget.abs().max(1.0)
}

fn check_feasible(costs: &[Vec<f64>], budget: f64) -> Result<(), AllocError> {
    let min_budget = min_feasible_budget(costs);
    if budget.is_nan() || budget < min_budget - budget_tolerance(min_budget) {
        return Err(AllocError::Infeasible { budget, min_budget });
    }
    Ok(())
}

fn post_check(costs: &[Vec<f64>], choice: &[usize], budget: f64) -> Result<(), AllocError> {
    if choice.len() != costs.len() {
        return Err(AllocError::PostCheck(format!("{} choices for {} groups", choice.len(), costs.len())));
    }
    if let Some(i) = choice.iter().enumerate().position(|(i, &j)| j >= costs[i].len()) {
        return Err(AllocError::PostCheck(format!("group {i} choice out of range")));
    }
    let total: f64 = choice.iter().enumerate().map(|(i, &j)| costs[i][j]).sum();
    if total > budget + budget_tolerance(budget) {
        return Err(AllocError::PostCheck(format!("cost {total} exceeds budget {budget}")));
    }
    Ok(())
}

/// Argmax of `score − η·cost` per group, lowest index on ties.
pub fn penalized_choice(scores: &[Vec<f64>], costs: &[Vec<f64>], eta: f64) -> Vec<usize> {
    scores
        .iter()
        .zip(costs)
        .map(|(s, c)| {
            let mut best = 0;
            for j in 1..s.len() {
                if s[j] - eta * c[j] > s[best] - eta * c[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn unconstrained(scores: &[Vec<f64>]) -> Vec<usize> {
    penalized_choice(scores, scores, 0.0)
}

fn total_cost(costs: &[Vec<f64>], choice: &[usize]) -> f64 {
    choice.iter().enumerate().map(|(i, &j)| costs[i][j]).sum()
}

fn total_score(scores: &[Vec<f64>], choice: &[usize]) -> f64 {
    choice.iter().enumerate().map(|(i, &j)| scores[i][j]).sum()
}

/// Integer cost units shared by the DP and the discretized brute force.
///
/// Each option's cost above its group minimum is rounded up to a whole
/// number of `resolution` steps, so any selection within `capacity` units
/// is feasible in true cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub resolution: f64,
    pub capacity: usize,
    pub units: Vec<Vec<usize>>,
}

impl Discretization {
    pub fn new(costs: &[Vec<f64>], budget: f64, steps: usize) -> Self {
        let resolution = budget.abs().max(f64::MIN_POSITIVE) / steps.max(1) as f64;
        let slack = (budget - min_feasible_budget(costs)).max(0.0);
        let capacity = ((slack / resolution).floor() as usize).min(steps.max(1) * 2);
        let units = costs
            .iter()
            .map(|row| {
                let lo = row_min(row);
                row.iter()
                    .map(|&c| {
                        let u = ((c - lo) / resolution).ceil();
                        if u > capacity as f64 { capacity + 1 } else { u as usize }
                    })
                    .collect()
            })
            .collect();
        Discretization { resolution, capacity, units }
    }
}

/// Multiple-choice knapsack by DP over discretized costs.
fn mckp_dp(scores: &[Vec<f64>], costs: &[Vec<f64>], budget: f64, steps: usize, cell_limit: usize) -> Result<(Vec<usize>, Discretization), AllocError> {
    let disc = Discretization::new(costs, budget, steps);
    let width = disc.capacity + 1;
    let cells = scores.len().saturating_mul(width);
    if cells > cell_limit {
        return Err(AllocError::MemoryBound { cells, limit: cell_limit });
    }
    // best[c]: max score of the groups so far using at most c units.
    let mut best = vec![0.0f64; width];
    let mut next = vec![0.0f64; width];
    let mut table = vec![0u8; cells];
    for (g, (s, u)) in scores.iter().zip(&disc.units).enumerate() {
        let row = &mut table[g * width..(g + 1) * width];
        for c in 0..width {
            let mut v = f64::NEG_INFINITY;
            let mut arg = 0u8;
            for (j, (&sj, &uj)) in s.iter().zip(u).enumerate() {
                if uj <= c {
                    let cand = best[c - uj] + sj;
                    if cand > v {
                        v = cand;
                        arg = j as u8;
                    }
                }
            }
            next[c] = v;
            row[c] = arg;
        }
        std::mem::swap(&mut best, &mut next);
    }
    let mut choice = vec![0; scores.len()];
    let mut c = disc.capacity;
    for g in (0..scores.len()).rev() {
        let j = table[g * width + c] as usize;
        choice[g] = j;
        c -= disc.units[g][j];
    }
    Ok((choice, disc))
}

fn solve_dp(scores: &[Vec<f64>], costs: &[Vec<f64>], budget: f64, steps: usize, cell_limit: usize) -> Result<Solution, AllocError> {
    check_shape(scores, costs)?;
    check_feasible(costs, budget)?;
    let free = unconstrained(scores);
    if total_cost(costs, &free) <= budget {
        return Ok(Solution { objective: total_score(scores, &free), assignment: Assignment { choice: free, expected_revenue: 0.0, expected_cost: 0.0 }, dual_bound: None, gap: None, resolution: None, error_bound: None });
    }
    let (choice, disc) = mckp_dp(scores, costs, budget, steps, cell_limit)?;
    Ok(Solution {
        objective: total_score(scores, &choice),
        assignment: Assignment { choice, expected_revenue: 0.0, expected_cost: 0.0 },
        dual_bound: None,
        gap: None,
        resolution: Some(disc.resolution),
        error_bound: Some(disc.resolution * scores.len() as f64),
    })
}

/// Bisection on the budget multiplier. Each distinct per-cluster choice it
/// visits seeds an upgrade and pairwise-exchange local search; the best
/// feasible result is returned.
fn solve_lagrangian(scores: &[Vec<f64>], costs: &[Vec<f64>], budget: f64) -> Result<Solution, AllocError> {
    check_shape(scores, costs)?;
    check_feasible(costs, budget)?;
    let dual = |eta: f64| -> f64 {
        scores
            .iter()
            .zip(costs)
            .map(|(s, c)| s.iter().zip(c).map(|(s, c)| s - eta * c).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            + eta * budget
    };
    let mut eta_max: f64 = 0.0;
    for (s, c) in scores.iter().zip(costs) {
        for a in 0..s.len() {
            for b in 0..s.len() {
                if c[a] > c[b] && s[a] > s[b] {
                    eta_max = eta_max.max((s[a] - s[b]) / (c[a] - c[b]));
                }
            }
        }
    }
    eta_max += 1.0;

    // Every distinct multiplier choice is a local-search start; overshooting
    // ones are first pushed back under budget.
    let mut starts: Vec<Vec<usize>> = Vec::new();
    let mut bound = f64::INFINITY;
    let mut visit = |eta: f64, starts: &mut Vec<Vec<usize>>| -> bool {
        bound = bound.min(dual(eta));
        let mut choice = penalized_choice(scores, costs, eta);
        let fits = total_cost(costs, &choice) <= budget;
        if !fits {
            downgrade(scores, costs, budget, &mut choice);
        }
        if !starts.contains(&choice) {
            starts.push(choice);
        }
        fits
    };
    if !visit(0.0, &mut starts) {
        let (mut lo, mut hi) = (0.0, eta_max);
        visit(hi, &mut starts);
        for _ in 0..BISECTION_ITERS {
            let mid = 0.5 * (lo + hi);
            if visit(mid, &mut starts) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mut choice in starts {
        if total_cost(costs, &choice) > budget {
            continue;
        }
        improve(scores, costs, budget, &mut choice);
        let obj = total_score(scores, &choice);
        if best.as_ref().is_none_or(|(b, _)| obj > *b) {
            best = Some((obj, choice));
        }
    }
    let choice = match best {
        Some((_, c)) => c,
        // Only reachable when every start overshoots by rounding.
        None => scores.iter().zip(costs).map(|(_, c)| argmin(c)).collect(),
    };
    let objective = total_score(scores, &choice);
    let bound = bound.max(objective);
    Ok(Solution {
        assignment: Assignment { choice, expected_revenue: 0.0, expected_cost: 0.0 },
        objective,
        dual_bound: Some(bound),
        gap: Some(bound - objective),
        resolution: None,
        error_bound: None,
    })
}

/// Moves clusters to cheaper options, smallest score loss per unit of cost
/// saved first, until the choice fits the budget.
fn downgrade(scores: &[Vec<f64>], costs: &[Vec<f64>], budget: f64, choice: &mut [usize]) {
    while total_cost(costs, choice) > budget {
        let mut step: Option<(f64, usize, usize)> = None;
        for (i, (s, c)) in scores.iter().zip(costs).enumerate() {
            let cur = choice[i];
            for j in 0..s.len() {
                let saved = c[cur] - c[j];
                if saved > 0.0 {
                    let rate = (s[cur] - s[j]) / saved;
                    if step.is_none_or(|(r, _, _)| rate < r) {
                        step = Some((rate, i, j));
                    }
                }
            }
        }
        match step {
            Some((_, i, j)) => choice[i] = j,
            None => break,
        }
    }
}

/// Local search from a feasible choice: the best single-cluster upgrade
/// while one fits, then the best improving pairwise exchange, repeated
/// until neither applies.
fn improve(scores: &[Vec<f64>], costs: &[Vec<f64>], budget: f64, choice: &mut [usize]) {
    for _ in 0..MAX_EXCHANGE_ROUNDS {
        let spent = total_cost(costs, choice);
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for (a, (sa, ca)) in scores.iter().zip(costs).enumerate() {
            let cur_a = choice[a];
            for ja in 0..sa.len() {
                let (ga, da) = (sa[ja] - sa[cur_a], ca[ja] - ca[cur_a]);
                if ja != cur_a && ga > 0.0 && spent + da <= budget && best.is_none_or(|b| ga > b.0) {
                    best = Some((ga, a, ja, a, ja));
                }
            }
        }
        if best.is_none() {
            for a in 0..scores.len() {
                for b in a + 1..scores.len() {
                    let (ca, cb) = (choice[a], choice[b]);
                    for ja in 0..scores[a].len() {
                        for jb in 0..scores[b].len() {
                            if ja == ca && jb == cb {
                                continue;
                            }
                            let gain = scores[a][ja] - scores[a][ca] + scores[b][jb] - scores[b][cb];
                            let delta = costs[a][ja] - costs[a][ca] + costs[b][jb] - costs[b][cb];
                            if gain > 1e-12 * gain.abs().max(1.0) && spent + delta <= budget && best.is_none_or(|x| gain > x.0) {
                                best = Some((gain, a, ja, b, jb));
                            }
                        }
                    }
                }
            }
        }
        let Some((_, a, ja, b, jb)) = best else { break };
        choice[a] = ja;
        choice[b] = jb;
    }
}

fn argmin(row: &[f64]) -> usize {
    (1..row.len()).fold(0, |b, j| if row[j] < row[b] { j } else { b })
}

fn enumeration_size(k: usize, m: usize) -> Result<u64, AllocError> {
    let mut size: u64 = 1;
    for _ in 0..k {
        size = size.saturating_mul(m as u64);
    }
    if size > MAX_BRUTE_FORCE {
        return Err(AllocError::TooLarge { size, limit: MAX_BRUTE_FORCE });
    }
    Ok(size)
}

/// Visits every one-per-group selection in lexicographic order.
fn enumerate(k: usize, m: usize, mut visit: impl FnMut(&[usize])) {
    let mut choice = vec![0usize; k];
    loop {
        visit(&choice);
        let mut g = k;
        loop {
            if g == 0 {
                return;
            }
            g -= 1;
            choice[g] += 1;
            if choice[g] < m {
                break;
            }
            choice[g] = 0;
        }
    }
}

fn solve_brute(scores: &[Vec<f64>], costs: &[Vec<f64>], budget: f64) -> Result<Solution, AllocError> {
    let m = check_shape(scores, costs)?;
    check_feasible(costs, budget)?;
    enumeration_size(scores.len(), m)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    enumerate(scores.len(), m, |choice| {
        if total_cost(costs, choice) <= budget {
            let obj = total_score(scores, choice);
            if best.as_ref().is_none_or(|(b, _)| obj > *b) {
                best = Some((obj, choice.to_vec()));
            }
        }
    });
    // The all-cheapest selection always fits, but rounding in the
    // feasibility check can reject it when the budget sits exactly on it.
    let (objective, choice) = best.unwrap_or_else(|| {
        let c: Vec<usize> = costs.iter().map(|r| argmin(r)).collect();
        (total_score(scores, &c), c)
    });
    Ok(Solution { assignment: Assignment { choice, expected_revenue: 0.0, expected_cost: 0.0 }, objective, dual_bound: None, gap: None, resolution: None, error_bound: None })
}

/// Brute force over the same discretized costs [`Method::ExactDp`] uses.
pub fn brute_force_discretized(scores: &[Vec<f64>], costs: &[Vec<f64>], budget: f64) -> Result<Solution, AllocError> {
    let m = check_shape(scores, costs)?;
    check_feasible(costs, budget)?;
    enumeration_size(scores.len(), m)?;
    let free = unconstrained(scores);
    let disc = Discretization::new(costs, budget, DP_STEPS);
    let (objective, choice, resolution) = if total_cost(costs, &free) <= budget {
        (total_score(scores, &free), free, None)
    } else {
        let mut best: Option<(f64, Vec<usize>)> = None;
        enumerate(scores.len(), m, |choice| {
            let units: usize = choice.iter().enumerate().map(|(i, &j)| disc.units[i][j]).sum();
            if units <= disc.capacity {
                let obj = total_score(scores, choice);
                if best.as_ref().is_none_or(|(b, _)| obj > *b) {
                    best = Some((obj, choice.to_vec()));
                }
            }
        });
        let (o, c) = best.expect("the all-cheapest selection uses zero units");
        (o, c, Some(disc.resolution))
    };
    Ok(Solution {
        assignment: Assignment { choice, expected_revenue: 0.0, expected_cost: 0.0 },
        objective,
        dual_bound: None,
        gap: None,
        resolution,
        error_bound: resolution.map(|r| r * scores.len() as f64),
    })
}

/// Solves a raw multiple-choice knapsack `max Σ scores s.t. Σ costs ≤ budget`.
pub fn solve_mckp(scores: &[Vec<f64>], costs: &[Vec<f64>], budget: f64, method: Method) -> Result<Solution, AllocError> {
    let sol = match method {
        Method::ExactDp => solve_dp(scores, costs, budget, DP_STEPS, usize::MAX),
        Method::LagrangianSweep => solve_lagrangian(scores, costs, budget),
        Method::BruteForce => solve_brute(scores, costs, budget),
    }?;
    post_check(costs, &sol.assignment.choice, budget)?;
    Ok(sol)
}

/// Solves the variance-averse cluster-level program at one budget.
pub fn solve_stochastic(stats: &ClusterStats, budget: f64, lambda: f64, kappa: f64, method: Method) -> Result<Solution, AllocError> {
    solve_scored(&score_matrix(stats, lambda, kappa), budget, method)
}

/// Like [`solve_stochastic`] on a precomputed score matrix.
pub fn solve_scored(sm: &ScoreMatrix, budget: f64, method: Method) -> Result<Solution, AllocError> {
    let mut sol = solve_mckp(&sm.scores, &sm.costs, budget, method)?;
    sol.assignment = sm.assignment(std::mem::take(&mut sol.assignment.choice));
    Ok(sol)
}

/// Exact individual-level allocation by DP over `steps` cost units.
///
/// The choice table holds `N × (steps + 1)` bytes; problems above
/// [`MAX_DP_CELLS`] fail with [`AllocError::MemoryBound`].
pub fn solve_exact_ip_with(revenues: &[Vec<f64>], costs: &[Vec<f64>], budget: f64, steps: usize) -> Result<Solution, AllocError> {
    let mut sol = solve_dp(revenues, costs, budget, steps, MAX_DP_CELLS)?;
    post_check(costs, &sol.assignment.choice, budget)?;
    sol.assignment.expected_revenue = sol.objective;
    sol.assignment.expected_cost = total_cost(costs, &sol.assignment.choice);
    Ok(sol)
}

pub fn solve_exact_ip(revenues: &[Vec<f64>], costs: &[Vec<f64>], budget: f64) -> Result<Solution, AllocError> {
    solve_exact_ip_with(revenues, costs, budget, DP_STEPS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryMeta {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub method: Method,
    #[serde(default)]
    pub stats_digest: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub budget: f64,
    pub choice: Vec<usize>,
    pub expected_revenue: f64,
    pub expected_cost: f64,
}

impl LibraryEntry {
    pub fn assignment(&self) -> Assignment {
        Assignment { choice: self.choice.clone(), expected_revenue: self.expected_revenue, expected_cost: self.expected_cost }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyLibrary {
    pub meta: LibraryMeta,
    pub entries: Vec<LibraryEntry>,
}

/// Hex SHA-256 of the statistics' JSON form.
pub fn stats_digest(stats: &ClusterStats) -> String {
    let json = serde_json::to_vec(stats).expect("stats serialize");
    hex::encode(Sha256::digest(&json))
}

/// Solves every grid budget (in parallel) and merges in grid order.
///
/// Infeasible budgets are skipped with a warning. When a solve would lower
/// expected revenue relative to the previous entry, the previous (still
/// feasible) assignment is carried forward and a warning recorded.
pub fn build_strategy_library(stats: &ClusterStats, config: &SolverConfig) -> Result<StrategyLibrary, AllocError> {
    config.validate()?;
    let sm = score_matrix(stats, config.lambda, config.kappa);
    let solved = par::map(Exec::default(), &config.budget_grid, |&b| solve_scored(&sm, b, config.method));
    let mut warnings = Vec::new();
    let mut entries: Vec<LibraryEntry> = Vec::new();
    for (&budget, res) in config.budget_grid.iter().zip(solved) {
        let sol = match res {
            Ok(s) => s,
            Err(AllocError::Infeasible { min_budget, .. }) => {
                warnings.push(format!("budget {budget} skipped: infeasible (minimum {min_budget})"));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut a = sol.assignment;
        if let Some(prev) = entries.last() {
            if a.expected_revenue < prev.expected_revenue {
                warnings.push(format!("budget {budget}: carried forward the assignment for budget {}", prev.budget));
                a = prev.assignment();
            }
        }
        entries.push(LibraryEntry { budget, choice: a.choice, expected_revenue: a.expected_revenue, expected_cost: a.expected_cost });
    }
    Ok(StrategyLibrary {
        meta: LibraryMeta {
            k: stats.k,
            m: stats.m,
            lambda: config.lambda,
            kappa: config.kappa,
            method: config.method,
            stats_digest: stats_digest(stats),
            warnings,
        },
        entries,
    })
}

/// Entry with the largest budget not exceeding `budget`.
pub fn lookup_strategy(library: &StrategyLibrary, budget: f64) -> Result<&LibraryEntry, AllocError> {
    let first = library.entries.first().ok_or(AllocError::EmptyLibrary)?;
    let idx = library.entries.partition_point(|e| e.budget <= budget);
    if idx == 0 {
        return Err(AllocError::BelowLibrary { budget, min: first.budget });
    }
    Ok(&library.entries[idx - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::CellStats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cell(rm: f64, rs: f64, cm: f64, cs: f64) -> CellStats {
        CellStats { revenue_mean: rm, revenue_std: rs, cost_mean: cm, cost_std: cs, count: 10, imputed: false }
    }

    fn two_by_two() -> ClusterStats {
        ClusterStats {
            k: 2,
            m: 2,
            sizes: vec![10, 30],
            cells: vec![cell(1.0, 0.5, 0.0, 0.0), cell(2.0, 1.0, 1.0, 0.2), cell(0.5, 0.1, 0.0, 0.0), cell(0.9, 0.4, 0.5, 0.3)],
        }
    }

    #[test]
    fn score_matrix_hand_arithmetic() {
        let sm = score_matrix(&two_by_two(), 0.5, 1.0);
        assert_eq!(sm.scores[0], vec![10.0 * (1.0 - 0.25), 10.0 * (2.0 - 0.5 - 0.2)]);
        assert!((sm.scores[1][1] - 30.0 * (0.9 - 0.2 - 0.3)).abs() < 1e-12);
        assert_eq!(sm.costs, vec![vec![0.0, 10.0], vec![0.0, 15.0]]);
        let neutral = score_matrix(&two_by_two(), 0.0, 0.0);
        assert_eq!(neutral.scores, neutral.revenues);
    }

    #[test]
    fn deterministic_cells_ignore_aversion() {
        let mut s = two_by_two();
        for c in &mut s.cells {
            c.revenue_std = 0.0;
            c.cost_std = 0.0;
        }
        assert_eq!(score_matrix(&s, 0.0, 0.0).scores, score_matrix(&s, 3.0, 7.0).scores);
    }

    #[test]
    fn unconstrained_and_binding_limits() {
        let s = two_by_two();
        for method in [Method::ExactDp, Method::LagrangianSweep, Method::BruteForce] {
            let free = solve_stochastic(&s, f64::INFINITY, 0.0, 0.0, method).unwrap();
            assert_eq!(free.assignment.choice, vec![1, 1]);
            let tight = solve_stochastic(&s, 0.0, 0.0, 0.0, method).unwrap();
            assert_eq!(tight.assignment.choice, vec![0, 0]);
            assert_eq!(tight.assignment.expected_cost, 0.0);
        }
        let mid = solve_stochastic(&s, 12.0, 0.0, 0.0, Method::ExactDp).unwrap();
        // Cluster 0 upgrade gains 10 for cost 10; cluster 1 gains 12 for 15.
        assert_eq!(mid.assignment.choice, vec![1, 0]);
    }

    #[test]
    fn infeasible_reports_minimum() {
        let scores = vec![vec![1.0, 2.0]];
        let costs = vec![vec![3.0, 4.0]];
        for method in [Method::ExactDp, Method::LagrangianSweep, Method::BruteForce] {
            assert_eq!(solve_mckp(&scores, &costs, 2.0, method).unwrap_err(), AllocError::Infeasible { budget: 2.0, min_budget: 3.0 });
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, k: usize, m: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
        let scores: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let costs: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        let lo = min_feasible_budget(&costs);
        let hi: f64 = costs.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).sum();
        let b = lo + rng.random::<f64>() * (hi - lo);
        (scores, costs, b)
    }

    #[test]
    fn dp_matches_discretized_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..40 {
            let k = rng.random_range(1..=6);
            let m = rng.random_range(1..=4);
            let (s, c, b) = random_instance(&mut rng, k, m);
            let dp = solve_mckp(&s, &c, b, Method::ExactDp).unwrap();
            let bf = brute_force_discretized(&s, &c, b).unwrap();
            assert_eq!(dp.objective, bf.objective);
            let exact = solve_mckp(&s, &c, b, Method::BruteForce).unwrap();
            assert!(dp.objective <= exact.objective);
        }
    }

    #[test]
    fn lagrangian_gap_is_sandwiched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..40 {
            let (s, c, b) = random_instance(&mut rng, 6, 4);
            let lag = solve_mckp(&s, &c, b, Method::LagrangianSweep).unwrap();
            let exact = solve_mckp(&s, &c, b, Method::BruteForce).unwrap();
            let bound = lag.dual_bound.unwrap();
            assert!(lag.objective <= exact.objective + 1e-9);
            assert!(bound >= exact.objective - 1e-9, "dual {bound} < optimum {}", exact.objective);
            assert!((lag.gap.unwrap() - (bound - lag.objective)).abs() < 1e-12);
            assert!(lag.gap.unwrap() >= 0.0);
        }
    }

    #[test]
    fn exact_ip_examples() {
        let sol = solve_exact_ip(&[vec![1.0, 10.0]], &[vec![1.0, 5.0]], 5.0).unwrap();
        assert_eq!((sol.assignment.choice.clone(), sol.assignment.expected_revenue), (vec![1], 10.0));
        let rev = vec![vec![0.0, 3.0, 4.0]; 4];
        let cost = vec![vec![0.0, 1.0, 2.0]; 4];
        let sol = solve_exact_ip(&rev, &cost, 0.0).unwrap();
        assert_eq!(sol.assignment.choice, vec![0; 4]);
    }

    #[test]
    fn exact_ip_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (r, c, b) = random_instance(&mut rng, 8, 3);
            let dp = solve_exact_ip(&r, &c, b).unwrap();
            let bf = brute_force_discretized(&r, &c, b).unwrap();
            assert_eq!(dp.objective, bf.objective);
        }
    }

    #[test]
    fn exact_ip_memory_guard() {
        let r = vec![vec![0.0, 1.0]; 10_000];
        let c = vec![vec![0.0, 1.0]; 10_000];
        assert!(matches!(solve_exact_ip(&r, &c, 5_000.0), Err(AllocError::MemoryBound { .. })));
    }

    #[test]
    fn brute_force_size_guard() {
        let s = vec![vec![1.0; 4]; 20];
        assert!(matches!(solve_mckp(&s, &s, 100.0, Method::BruteForce), Err(AllocError::TooLarge { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::new(vec![]).validate().is_err());
        assert!(SolverConfig::new(vec![1.0, 1.0]).validate().is_err());
        assert!(SolverConfig::new(vec![0.0, 1.0]).validate().is_err());
        assert!(SolverConfig::new(vec![1.0, 2.0]).validate().is_ok());
    }

    fn library_stats() -> ClusterStats {
        // Min feasible budget 10 (cluster costs 1·10 + 0·...).
        ClusterStats {
            k: 2,
            m: 3,
            sizes: vec![10, 10],
            cells: vec![
                cell(1.0, 0.1, 1.0, 0.0),
                cell(2.0, 0.1, 2.0, 0.0),
                cell(3.0, 0.1, 3.0, 0.0),
                cell(0.5, 0.1, 0.0, 0.0),
                cell(1.5, 0.1, 1.0, 0.0),
                cell(1.8, 0.1, 2.5, 0.0),
            ],
        }
    }

    #[test]
    fn library_skips_infeasible_and_matches_one_off_solves() {
        let stats = library_stats();
        let cfg = SolverConfig { lambda: 0.0, kappa: 0.0, budget_grid: vec![5.0, 10.0, 20.0, 30.0, 55.0], method: Method::ExactDp };
        let lib = build_strategy_library(&stats, &cfg).unwrap();
        assert_eq!(lib.entries.len(), 4);
        assert_eq!(lib.meta.warnings.len(), 1);
        assert!(lib.meta.warnings[0].contains("budget 5"));
        for e in &lib.entries {
            let one = solve_stochastic(&stats, e.budget, 0.0, 0.0, Method::ExactDp).unwrap();
            assert_eq!(e.choice, one.assignment.choice);
            assert!(e.expected_cost <= e.budget);
        }
        assert!(lib.entries.windows(2).all(|w| w[1].expected_revenue >= w[0].expected_revenue));
    }

    #[test]
    fn lookup_rules() {
        let cfg = SolverConfig { lambda: 0.0, kappa: 0.0, budget_grid: vec![10.0, 20.0, 30.0], method: Method::ExactDp };
        let lib = build_strategy_library(&library_stats(), &cfg).unwrap();
        assert_eq!(lookup_strategy(&lib, 20.0).unwrap().budget, 20.0);
        assert_eq!(lookup_strategy(&lib, 25.0).unwrap().budget, 20.0);
        assert_eq!(lookup_strategy(&lib, 1e9).unwrap().budget, 30.0);
        assert!(matches!(lookup_strategy(&lib, 9.0), Err(AllocError::BelowLibrary { .. })));
        let empty = StrategyLibrary { meta: lib.meta.clone(), entries: vec![] };
        assert_eq!(lookup_strategy(&empty, 10.0).unwrap_err(), AllocError::EmptyLibrary);
    }

    #[test]
    fn library_json_shape() {
        let cfg = SolverConfig::new(vec![10.0, 20.0]);
        let lib = build_strategy_library(&library_stats(), &cfg).unwrap();
        let v: serde_json::Value = serde_json::to_value(&lib).unwrap();
        assert_eq!(v["meta"]["K"], 2);
        assert_eq!(v["meta"]["M"], 3);
        assert_eq!(v["meta"]["method"], "exact_dp");
        assert!(v["entries"][0]["choice"].is_array());
        let back: StrategyLibrary = serde_json::from_value(v).unwrap();
        assert_eq!(back, lib);
    }
}
