//! Staged offline pipeline over an artifact directory.
//!
//! Every stage reads its inputs from files, writes its outputs to files and
//! records both sets of SHA-256 digests, plus a digest of the config
//! sections it depends on, in `manifest.json`. A stage whose record still
//! matches is skipped, so deleting an artifact re-runs only the stages from
//! the one that produced it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::allocator::{build_strategy_library, StrategyLibrary};
use crate::baselines::{train_dfl, train_slearner, train_two_model, SLearner, TwoModel};
use crate::cluster::{cluster_stats, kmeans_fit_traced, CellImputer, ClusterModel, ClusterStats};
use crate::config::{Family, RunConfig};
use crate::data::{load_dataset_with, save_dataset, Dataset, DatasetKind, LoadOptions};
use crate::eval::{compare, HeuristicFamily, HrcFamily, LagrangianFamily, PolicyFamily, Report};
use crate::par::Exec;
use crate::repnet::{distill, train_repnet, DistilledClassifier, RepNet};
use crate::synthgen::{generate_holdout, generate_obs, generate_rct};

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const TRUTH: &str = "truth.json";
pub const REPNET: &str = "repnet.json";
pub const REPNET_TRACE: &str = "repnet_trace.json";
pub const CLUSTERS: &str = "clusters.json";
pub const LIBRARY: &str = "library.json";
pub const CLASSIFIER: &str = "classifier.json";
pub const DISTILL_REPORT: &str = "distill.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const SLEARNER: &str = "slearner.json";
pub const TWO_MODEL: &str = "two_model.json";
pub const DFL: &str = "dfl.json";
pub const COMPARE_CSV: &str = "compare.csv";
pub const COMPARE_JSON: &str = "compare.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Train,
    Cluster,
    Solve,
    Distill,
    Eval,
    Compare,
}

impl Stage {
    pub const ALL: [Stage; 7] = [Stage::Gen, Stage::Train, Stage::Cluster, Stage::Solve, Stage::Distill, Stage::Eval, Stage::Compare];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Train => "train",
            Stage::Cluster => "cluster",
            Stage::Solve => "solve",
            Stage::Distill => "distill",
            Stage::Eval => "eval",
            Stage::Compare => "compare",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad configuration; detected before any stage runs.
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {cause}")]
    Stage { stage: Stage, cause: String },
}

impl PipelineError {
    fn stage(stage: Stage, cause: impl fmt::Display) -> Self {
        PipelineError::Stage { stage, cause: cause.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_sha256: String,
    /// Input path to digest; relative to the artifact directory when the
    /// input lives there.
    pub inputs: BTreeMap<String, String>,
    /// Output file name within the artifact directory to digest.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Manifest {
    fn new(seed: u64) -> Self {
        Manifest { version: env!("CARGO_PKG_VERSION").into(), seed, stages: BTreeMap::new() }
    }

    pub fn load(dir: &Path) -> Option<Manifest> {
        let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Checks every recorded output against the file on disk and every
    /// recorded input against the digest its producing stage recorded.
    pub fn verify(&self, dir: &Path) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let mut produced = BTreeMap::new();
        for (stage, rec) in &self.stages {
            for (name, digest) in &rec.outputs {
                match file_digest(&dir.join(name)) {
                    Ok(d) if &d == digest => {}
                    Ok(_) => problems.push(format!("{stage}: {name} changed")),
                    Err(_) => problems.push(format!("{stage}: {name} missing")),
                }
                produced.insert(dir.join(name), digest.clone());
            }
        }
        for (stage, rec) in &self.stages {
            for (path, digest) in &rec.inputs {
                if let Some(p) = produced.get(&dir.join(path)) {
                    if p != digest {
                        problems.push(format!("{stage}: input {path} is stale"));
                    }
                }
            }
        }
        if problems.is_empty() { Ok(()) } else { Err(problems) }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Outcome of one stage in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// Runs stages against a config and an artifact directory.
pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
    manifest: Manifest,
    exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub model: ClusterModel,
    /// Inertia after every assignment step of the best restart.
    pub inertia_trace: Vec<f64>,
    /// Cluster of every training row.
    pub assignments: Vec<usize>,
    pub stats: ClusterStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub loss_trace: Vec<f64>,
    /// Share of rows where the classifier matches the nearest center of
    /// the embedding.
    pub train_agreement: f64,
    pub test_agreement: f64,
}

impl Pipeline {
    /// Checks that referenced input files exist and prepares `out`.
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self, PipelineError> {
        for p in [&cfg.data.train, &cfg.data.test].into_iter().flatten() {
            if !p.is_file() {
                return Err(PipelineError::Config(format!("data file {} not found", p.display())));
            }
        }
        fs::create_dir_all(&out).map_err(|e| PipelineError::Config(format!("cannot create {}: {e}", out.display())))?;
        let manifest = match Manifest::load(&out) {
            Some(m) if m.seed == cfg.seed && m.version == env!("CARGO_PKG_VERSION") => m,
            _ => Manifest::new(cfg.seed),
        };
        Ok(Pipeline { cfg, out, manifest, exec: Exec::default() })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn train_path(&self) -> PathBuf {
        self.cfg.data.train.clone().unwrap_or_else(|| self.path(TRAIN_CSV))
    }

    pub fn test_path(&self) -> PathBuf {
        self.cfg.data.test.clone().unwrap_or_else(|| self.path(TEST_CSV))
    }

    /// Stages that `pipeline` runs through `last`, in order.
    pub fn plan(&self, last: Stage) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|&s| s <= last)
            .filter(|&s| s != Stage::Gen || self.cfg.data.train.is_none())
            .collect()
    }

    pub fn run_through(&mut self, last: Stage) -> Result<Vec<(Stage, StageStatus)>, PipelineError> {
        self.plan(last).into_iter().map(|s| Ok((s, self.run(s)?))).collect()
    }

    /// Runs one stage unless its manifest record is still current.
    pub fn run(&mut self, stage: Stage) -> Result<StageStatus, PipelineError> {
        if stage == Stage::Gen && self.cfg.gen.is_none() {
            return Err(PipelineError::Config("gen needs a [gen] section".into()));
        }
        let inputs = self.inputs(stage);
        let mut input_digests = BTreeMap::new();
        for p in &inputs {
            let d = file_digest(p).map_err(|_| {
                PipelineError::stage(stage, format!("missing input {}; run the stage that produces it first", p.display()))
            })?;
            let key = p.strip_prefix(&self.out).unwrap_or(p);
            input_digests.insert(key.display().to_string(), d);
        }
        let config_sha256 = sha256_hex(self.stage_config(stage).to_string().as_bytes());
        if let Some(rec) = self.manifest.stages.get(&stage) {
            let current = rec.config_sha256 == config_sha256
                && rec.inputs == input_digests
                && rec.outputs.iter().all(|(name, d)| file_digest(&self.path(name)).is_ok_and(|x| &x == d));
            if current {
                log::info!("{stage}: up to date");
                return Ok(StageStatus::Skipped);
            }
        }
        log::info!("{stage}: running");
        let outputs = self.execute(stage)?;
        let mut output_digests = BTreeMap::new();
        for name in outputs {
            let d = file_digest(&self.path(name)).map_err(|e| PipelineError::stage(stage, e))?;
            output_digests.insert(name.to_string(), d);
        }
        self.manifest.stages.insert(stage, StageRecord { config_sha256, inputs: input_digests, outputs: output_digests });
        self.save_manifest().map_err(|e| PipelineError::stage(stage, e))?;
        Ok(StageStatus::Ran)
    }

    fn save_manifest(&self) -> std::io::Result<()> {
        write_json(&self.path(MANIFEST), &self.manifest)
    }

    fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let (train, test) = (self.train_path(), self.test_path());
        match stage {
            Stage::Gen => vec![],
            Stage::Train => vec![train],
            Stage::Cluster => vec![train, self.path(REPNET)],
            Stage::Solve => vec![self.path(CLUSTERS)],
            Stage::Distill => vec![train, test, self.path(REPNET), self.path(CLUSTERS)],
            Stage::Eval => vec![train, test, self.path(CLASSIFIER), self.path(LIBRARY)],
            Stage::Compare => {
                let mut v = vec![train, test];
                if self.cfg.eval.families.contains(&Family::Hrc) {
                    v.extend([self.path(CLASSIFIER), self.path(LIBRARY)]);
                }
                v
            }
        }
    }

    /// The config sections a stage depends on.
    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        let data = json!({
            "kind": c.data.kind,
            "treatment_values": c.data.treatment_values,
            "revenue_column": c.data.revenue_column,
        });
        match stage {
            Stage::Gen => json!({ "seed": c.seed, "data": data, "gen": c.gen }),
            Stage::Train => json!({ "seed": c.seed, "data": data, "repnet": c.repnet }),
            Stage::Cluster => json!({ "seed": c.seed, "data": data, "cluster": c.cluster }),
            Stage::Solve => json!({ "solver": c.solver, "budgets": c.eval.budgets }),
            Stage::Distill => json!({ "seed": c.seed, "data": data, "distill": c.distill }),
            Stage::Eval => json!({ "data": data, "eval": c.eval }),
            Stage::Compare => json!({ "seed": c.seed, "data": data, "baselines": c.baselines, "eval": c.eval }),
        }
    }

    fn execute(&self, stage: Stage) -> Result<Vec<&'static str>, PipelineError> {
        let fail = |e: &dyn fmt::Display| PipelineError::stage(stage, e);
        match stage {
            Stage::Gen => {
                let gen = self.cfg.gen.as_ref().expect("checked");
                let gc = self.cfg.gen_config().expect("checked");
                let (train, truth) = match self.cfg.data.kind {
                    DatasetKind::Rct => generate_rct(&gc),
                    DatasetKind::Obs => generate_obs(&gc),
                }
                .map_err(|e| fail(&e))?;
                let (test, _) = generate_holdout(&gc, gen.test_n).map_err(|e| fail(&e))?;
                save_dataset(&train, &self.path(TRAIN_CSV)).map_err(|e| fail(&e))?;
                save_dataset(&test, &self.path(TEST_CSV)).map_err(|e| fail(&e))?;
                write_json(&self.path(TRUTH), &truth).map_err(|e| fail(&e))?;
                Ok(vec![TRAIN_CSV, TEST_CSV, TRUTH])
            }
            Stage::Train => {
                let ds = self.train_data(stage)?;
                let trained = train_repnet(&ds, &self.cfg.repnet.net, &self.cfg.repnet.train.with_seed(self.cfg.seed)).map_err(|e| fail(&e))?;
                trained.model.save(&self.path(REPNET)).map_err(|e| fail(&e))?;
                write_json(&self.path(REPNET_TRACE), &json!({ "loss_trace": trained.loss_trace })).map_err(|e| fail(&e))?;
                Ok(vec![REPNET, REPNET_TRACE])
            }
            Stage::Cluster => {
                let ds = self.train_data(stage)?;
                let net = self.repnet(stage)?;
                let z = net.embed_batch(&ds.features(), self.exec).map_err(|e| fail(&e))?;
                let (model, inertia_trace) = kmeans_fit_traced(&z, &self.cfg.kmeans_config()).map_err(|e| fail(&e))?;
                let assignments = model.assign_batch(&z, self.exec);
                let stats = cluster_stats(&ds, &assignments, model.k(), Some(&net as &dyn CellImputer)).map_err(|e| fail(&e))?;
                if stats.imputed_cells() > 0 {
                    log::warn!("cluster: {} thin (cluster, arm) cells imputed", stats.imputed_cells());
                }
                write_json(&self.path(CLUSTERS), &ClusterArtifact { model, inertia_trace, assignments, stats }).map_err(|e| fail(&e))?;
                Ok(vec![CLUSTERS])
            }
            Stage::Solve => {
                let clusters: ClusterArtifact = read_json(&self.path(CLUSTERS)).map_err(|e| fail(&e))?;
                let lib = build_strategy_library(&clusters.stats, &self.cfg.solver_config(clusters.stats.total())).map_err(|e| fail(&e))?;
                for w in &lib.meta.warnings {
                    log::warn!("solve: {w}");
                }
                write_json(&self.path(LIBRARY), &lib).map_err(|e| fail(&e))?;
                Ok(vec![LIBRARY])
            }
            Stage::Distill => {
                let ds = self.train_data(stage)?;
                let test = self.test_data(stage)?;
                let net = self.repnet(stage)?;
                let clusters: ClusterArtifact = read_json(&self.path(CLUSTERS)).map_err(|e| fail(&e))?;
                let trained = distill(&net, &clusters.model, &ds, &self.cfg.distill.with_seed(self.cfg.seed)).map_err(|e| fail(&e))?;
                let clf = trained.model;
                let agree = |d: &Dataset| -> Result<f64, PipelineError> {
                    let xs = d.features();
                    let z = net.embed_batch(&xs, self.exec).map_err(|e| fail(&e))?;
                    let teacher = clusters.model.assign_batch(&z, self.exec);
                    let student = clf.classify_batch(&xs, self.exec);
                    let same = teacher.iter().zip(&student).filter(|(a, b)| a == b).count();
                    Ok(same as f64 / d.len().max(1) as f64)
                };
                let report = DistillReport { loss_trace: trained.loss_trace, train_agreement: agree(&ds)?, test_agreement: agree(&test)? };
                clf.save(&self.path(CLASSIFIER)).map_err(|e| fail(&e))?;
                write_json(&self.path(DISTILL_REPORT), &report).map_err(|e| fail(&e))?;
                Ok(vec![CLASSIFIER, DISTILL_REPORT])
            }
            Stage::Eval => {
                let ds = self.train_data(stage)?;
                let test = self.test_data(stage)?;
                let clf = DistilledClassifier::load(&self.path(CLASSIFIER)).map_err(|e| fail(&e))?;
                let lib: StrategyLibrary = read_json(&self.path(LIBRARY)).map_err(|e| fail(&e))?;
                let fam = HrcFamily { clusterer: &clf, library: &lib, population: ds.len() };
                let report = compare(&[(Family::Hrc.name(), &fam)], &test, &self.cfg.eval.budgets).map_err(|e| fail(&e))?;
                self.write_report(&report, EVAL_CSV, EVAL_JSON).map_err(|e| fail(&e))?;
                Ok(vec![EVAL_CSV, EVAL_JSON])
            }
            Stage::Compare => self.execute_compare(),
        }
    }

    fn execute_compare(&self) -> Result<Vec<&'static str>, PipelineError> {
        let stage = Stage::Compare;
        let fail = |e: &dyn fmt::Display| PipelineError::stage(stage, e);
        let ds = self.train_data(stage)?;
        let test = self.test_data(stage)?;
        let b = &self.cfg.baselines;
        let tc = b.train.with_seed(self.cfg.seed);
        let features: Vec<Vec<f64>> = test.samples().iter().map(|s| s.features.clone()).collect();
        let mut outputs = Vec::new();

        let hrc = if self.cfg.eval.families.contains(&Family::Hrc) {
            let clf = DistilledClassifier::load(&self.path(CLASSIFIER)).map_err(|e| fail(&e))?;
            let lib: StrategyLibrary = read_json(&self.path(LIBRARY)).map_err(|e| fail(&e))?;
            Some((clf, lib))
        } else {
            None
        };
        let slearner: Option<SLearner> = if self.cfg.eval.families.contains(&Family::Heuristic) {
            let m = train_slearner(&ds, &b.net, &tc).map_err(|e| fail(&e))?.model;
            m.save(&self.path(SLEARNER)).map_err(|e| fail(&e))?;
            outputs.push(SLEARNER);
            Some(m)
        } else {
            None
        };
        let two_model: Option<TwoModel> = if self.cfg.eval.families.contains(&Family::Lagrangian) {
            let m = train_two_model(&ds, &b.net, &tc).map_err(|e| fail(&e))?.model;
            m.save(&self.path(TWO_MODEL)).map_err(|e| fail(&e))?;
            outputs.push(TWO_MODEL);
            Some(m)
        } else {
            None
        };
        let dfl: Option<TwoModel> = if self.cfg.eval.families.contains(&Family::Dfl) {
            let m = train_dfl(&ds, &b.dfl, &b.net, &tc).map_err(|e| fail(&e))?.model;
            m.save(&self.path(DFL)).map_err(|e| fail(&e))?;
            outputs.push(DFL);
            Some(m)
        } else {
            None
        };
        let unit_costs = b.unit_costs.clone().unwrap_or_else(|| ds.arm_cost_means());

        let mut families: Vec<(&str, Box<dyn PolicyFamily + '_>)> = Vec::new();
        for f in &self.cfg.eval.families {
            let fam: Box<dyn PolicyFamily + '_> = match f {
                Family::Hrc => {
                    let (clf, lib) = hrc.as_ref().expect("loaded");
                    Box::new(HrcFamily { clusterer: clf, library: lib, population: ds.len() })
                }
                Family::Heuristic => Box::new(HeuristicFamily {
                    model: slearner.as_ref().expect("trained"),
                    features: features.clone(),
                    unit_costs: unit_costs.clone(),
                }),
                Family::Lagrangian => Box::new(LagrangianFamily::new(two_model.as_ref().expect("trained"), &features)),
                Family::Dfl => Box::new(LagrangianFamily::new(dfl.as_ref().expect("trained"), &features)),
            };
            families.push((f.name(), fam));
        }
        let refs: Vec<(&str, &dyn PolicyFamily)> = families.iter().map(|(n, f)| (*n, f.as_ref())).collect();
        let report = compare(&refs, &test, &self.cfg.eval.budgets).map_err(|e| fail(&e))?;
        self.write_report(&report, COMPARE_CSV, COMPARE_JSON).map_err(|e| fail(&e))?;
        outputs.extend([COMPARE_CSV, COMPARE_JSON]);
        Ok(outputs)
    }

    fn write_report(&self, report: &Report, csv_name: &str, json_name: &str) -> Result<(), Box<dyn std::error::Error>> {
        let file = fs::File::create(self.path(csv_name))?;
        report.write_csv(std::io::BufWriter::new(file))?;
        write_json(&self.path(json_name), report)?;
        Ok(())
    }

    fn load(&self, stage: Stage, path: &Path, kind: DatasetKind) -> Result<Dataset, PipelineError> {
        let opts = LoadOptions { kind, ..self.cfg.load_options() };
        load_dataset_with(path, &self.cfg.treatment_set(), &opts).map_err(|e| PipelineError::stage(stage, e))
    }

    fn train_data(&self, stage: Stage) -> Result<Dataset, PipelineError> {
        self.load(stage, &self.train_path(), self.cfg.data.kind)
    }

    fn test_data(&self, stage: Stage) -> Result<Dataset, PipelineError> {
        self.load(stage, &self.test_path(), DatasetKind::Rct)
    }

    fn repnet(&self, stage: Stage) -> Result<RepNet, PipelineError> {
        RepNet::load(&self.path(REPNET)).map_err(|e| PipelineError::stage(stage, e))
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> std::io::Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::other(format!("{}: {e}", path.display())))
}
