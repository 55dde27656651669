//! Run configuration: one TOML document with typed sections. Unknown keys
//! are rejected and every error carries a line number.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{Method, SolverConfig};
use crate::baselines::{BaselineConfig, DflConfig};
use crate::cluster::KMeansConfig;
use crate::data::{DatasetKind, LoadOptions, TreatmentSet};
use crate::eval::Estimator;
use crate::nn::TrainConfig;
use crate::repnet::RepNetConfig;
use crate::synthgen::{default_treatment_values, GenConfig, Moments, ResponseSurface};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Invalid { path: PathBuf, line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
    /// Artifact directory, relative to the config file.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub gen: Option<GenSection>,
    #[serde(default)]
    pub repnet: RepNetSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub distill: TrainSection,
    #[serde(default)]
    pub baselines: BaselinesSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// How the training log was collected. Evaluation data is always
    /// randomized.
    pub kind: DatasetKind,
    pub treatment_values: Vec<f64>,
    /// Existing CSV files; when unset the `gen` section produces them.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub revenue_column: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DatasetKind::Rct,
            treatment_values: default_treatment_values(),
            train: None,
            test: None,
            revenue_column: "revenue".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    WinterTrain,
    SummerTest,
}

impl Calibration {
    pub fn moments(self) -> Moments {
        match self {
            Calibration::WinterTrain => Moments::WINTER_TRAIN,
            Calibration::SummerTest => Moments::SUMMER_TEST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    /// Training rows.
    pub n: usize,
    /// Randomized hold-out rows.
    pub test_n: usize,
    pub d: usize,
    pub groups: usize,
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
    /// Rescales the surface and noise so the generated population,
    /// contamination included, matches recorded moments.
    #[serde(default)]
    pub calibrate: Option<Calibration>,
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection { learning_rate: t.learning_rate, epochs: t.epochs, batch_size: t.batch_size, weight_decay: t.weight_decay }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RepNetSection {
    pub net: RepNetConfig,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub k: usize,
    pub max_iters: usize,
    pub n_init: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let c = KMeansConfig::new(100, 0);
        ClusterSection { k: c.k, max_iters: c.max_iters, n_init: c.n_init }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub lambda: f64,
    pub kappa: f64,
    pub method: Method,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::new(Vec::new());
        SolverSection { lambda: s.lambda, kappa: s.kappa, method: s.method }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Hrc,
    Heuristic,
    Lagrangian,
    Dfl,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Hrc => "hrc",
            Family::Heuristic => "heuristic",
            Family::Lagrangian => "lagrangian",
            Family::Dfl => "dfl",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinesSection {
    pub net: BaselineConfig,
    pub train: TrainSection,
    pub dfl: DflConfig,
    /// Per-arm unit costs for the uplift heuristic; the training arm cost
    /// means when unset.
    pub unit_costs: Option<Vec<f64>>,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        BaselinesSection { net: BaselineConfig::default(), train: TrainSection::default(), dfl: DflConfig::default(), unit_costs: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Budgets per individual, ascending.
    pub budgets: Vec<f64>,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default = "all_families")]
    pub families: Vec<Family>,
}

fn all_families() -> Vec<Family> {
    vec![Family::Hrc, Family::Heuristic, Family::Lagrangian, Family::Dfl]
}

impl RunConfig {
    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Self::parse(&text).map_err(|(line, msg)| ConfigError::Invalid { path: path.into(), line, msg })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.out, &mut cfg.data.train, &mut cfg.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses and validates config text; errors are `(line, message)`.
    pub fn parse(text: &str) -> Result<Self, (usize, String)> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| line_of(text, s.start));
            (line, e.message().to_string())
        })?;
        cfg.validate().map_err(|(section, msg)| (section_line(text, section), msg))?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        let d = &self.data;
        TreatmentSet::from_values(d.treatment_values.clone()).map_err(|e| ("data", e.to_string()))?;
        if d.train.is_some() != d.test.is_some() {
            return Err(("data", "train and test must be given together".into()));
        }
        if d.train.is_none() && self.gen.is_none() {
            return Err(("data", "no train/test files and no [gen] section".into()));
        }
        if let Some(g) = &self.gen {
            if g.test_n == 0 {
                return Err(("gen", "test_n must be positive".into()));
            }
            self.gen_config().expect("gen present").validate().map_err(|e| ("gen", e.to_string()))?;
        }
        self.repnet.net.validate().map_err(|e| ("repnet", e.to_string()))?;
        self.repnet.train.with_seed(0).validate().map_err(|e| ("repnet", e.to_string()))?;
        self.distill.with_seed(0).validate().map_err(|e| ("distill", e.to_string()))?;
        self.baselines.train.with_seed(0).validate().map_err(|e| ("baselines", e.to_string()))?;
        self.baselines.dfl.validate().map_err(|e| ("baselines", e.to_string()))?;
        if self.baselines.net.hidden.is_empty() {
            return Err(("baselines", "net.hidden must name at least one layer".into()));
        }
        if let Some(u) = &self.baselines.unit_costs {
            if u.len() != d.treatment_values.len() {
                return Err(("baselines", format!("unit_costs has {} entries for {} treatments", u.len(), d.treatment_values.len())));
            }
        }
        let c = &self.cluster;
        if c.k == 0 || c.max_iters == 0 || c.n_init == 0 {
            return Err(("cluster", "k, max_iters and n_init must be positive".into()));
        }
        let e = &self.eval;
        if e.budgets.is_empty() || e.budgets.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(("eval", "budgets must be a nonempty list of finite values >= 0".into()));
        }
        if e.budgets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(("eval", "budgets must be strictly increasing".into()));
        }
        if e.families.is_empty() {
            return Err(("eval", "families must not be empty".into()));
        }
        if e.families.iter().enumerate().any(|(i, f)| e.families[..i].contains(f)) {
            return Err(("eval", "families must not repeat".into()));
        }
        self.solver_config(1).validate().map_err(|e| ("solver", e.to_string()))?;
        Ok(())
    }

    pub fn treatment_set(&self) -> TreatmentSet {
        TreatmentSet::from_values(self.data.treatment_values.clone()).expect("validated treatment values")
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { kind: self.data.kind, revenue_column: self.data.revenue_column.clone() }
    }

    /// Generator config seeded by the run seed, calibrated if requested.
    pub fn gen_config(&self) -> Option<GenConfig> {
        let g = self.gen.as_ref()?;
        let cfg = GenConfig {
            n: g.n,
            d: g.d,
            groups: g.groups,
            treatment_values: self.data.treatment_values.clone(),
            group_radius: g.group_radius,
            noise_sigma: g.noise_sigma,
            cost_event_rate: g.cost_event_rate,
            contamination_rate: g.contamination_rate,
            contamination_scale: g.contamination_scale,
            obs_bias: g.obs_bias,
            seed: self.seed,
            response: g.response.clone(),
        };
        Some(match g.calibrate {
            Some(c) => cfg.calibrated(c.moments()),
            None => cfg,
        })
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig { k: self.cluster.k, max_iters: self.cluster.max_iters, n_init: self.cluster.n_init, seed: self.seed }
    }

    /// Library grid in absolute budget for a population of `n`.
    pub fn solver_config(&self, n: usize) -> SolverConfig {
        SolverConfig {
            lambda: self.solver.lambda,
            kappa: self.solver.kappa,
            budget_grid: self.eval.budgets.iter().map(|b| b * n as f64).collect(),
            method: self.solver.method,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of the `[section]` header, or 1 when the section is implicit.
fn section_line(text: &str, section: &str) -> usize {
    let header = format!("[{section}");
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.starts_with(&header) && l[header.len()..].starts_with([']', '.'])
        })
        .map_or(1, |i| i + 1)
}
