use std::fs;

use hrc::config::RunConfig;
use hrc::par::Exec;
use hrc::pipeline::{Pipeline, PipelineError, Stage, StageStatus, CLUSTERS, EVAL_CSV, LIBRARY, REPNET, TEST_CSV, TRAIN_CSV};

const BASE: &str = r#"seed = 4

[gen]
n = 800
test_n = 800
d = 3
groups = 4
noise_sigma = 0.3

[repnet.train]
epochs = 5

[cluster]
k = 4

[eval]
budgets = [0.35, 0.45]
"#;

#[test]
fn execution_mode_does_not_change_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(BASE).unwrap();
    let mut outs = Vec::new();
    for (name, exec) in [("seq", Exec::Sequential), ("par", Exec::Parallel)] {
        let out = dir.path().join(name);
        Pipeline::new(cfg.clone(), out.clone()).unwrap().with_exec(exec).run_through(Stage::Eval).unwrap();
        outs.push(out);
    }
    for name in [TRAIN_CSV, REPNET, CLUSTERS, LIBRARY, EVAL_CSV] {
        assert_eq!(fs::read(outs[0].join(name)).unwrap(), fs::read(outs[1].join(name)).unwrap(), "{name}");
    }
}

#[test]
fn external_data_skips_generation() {
    let dir = tempfile::tempdir().unwrap();
    let gen_out = dir.path().join("gen");
    Pipeline::new(RunConfig::parse(BASE).unwrap(), gen_out.clone()).unwrap().run(Stage::Gen).unwrap();

    let mut cfg = RunConfig::parse(BASE).unwrap();
    cfg.gen = None;
    cfg.data.train = Some(gen_out.join(TRAIN_CSV));
    cfg.data.test = Some(gen_out.join(TEST_CSV));
    let mut p = Pipeline::new(cfg, dir.path().join("run")).unwrap();
    assert_eq!(p.plan(Stage::Eval)[0], Stage::Train);
    let statuses = p.run_through(Stage::Eval).unwrap();
    assert!(statuses.iter().all(|(_, s)| *s == StageStatus::Ran));
    assert!(matches!(p.run(Stage::Gen), Err(PipelineError::Config(_))));
}

#[test]
fn observational_training_log() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace("seed = 4", "seed = 4\n\n[data]\nkind = \"obs\"").replace("noise_sigma = 0.3", "noise_sigma = 0.3\nobs_bias = 2.0");
    let cfg = RunConfig::parse(&text).unwrap();
    let mut p = Pipeline::new(cfg, dir.path().to_path_buf()).unwrap();
    p.run_through(Stage::Eval).unwrap();
    let train = fs::read_to_string(dir.path().join(TRAIN_CSV)).unwrap();
    // Confounded logging leaves non-uniform propensities.
    let props: Vec<f64> = train.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(props.iter().any(|p| (p - props[0]).abs() > 1e-6));
}
