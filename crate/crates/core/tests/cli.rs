use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use hrc::eval::Report;
use hrc::pipeline::{read_json, Manifest, CLASSIFIER, CLUSTERS, COMPARE_CSV, COMPARE_JSON, EVAL_CSV, LIBRARY, MANIFEST, REPNET, TEST_CSV, TRAIN_CSV, TRUTH};

const TOY: &str = r#"seed = 1

[gen]
n = 1000
test_n = 1000
d = 4
groups = 5
noise_sigma = 0.5

[repnet.train]
epochs = 10

[cluster]
k = 5

[baselines.train]
epochs = 10

[eval]
budgets = [0.3, 0.35, 0.4, 0.45, 0.5]
"#;

fn hrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrc")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    hrc(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_writes_splits_and_truth_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run("gen", &cfg, out, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in [TRAIN_CSV, TEST_CSV, TRUTH] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let train = fs::read_to_string(a.join(TRAIN_CSV)).unwrap();
    assert!(train.starts_with("f0,f1,f2,f3,t,cost,revenue,propensity\n"));
    assert_eq!(train.lines().count(), 1001);

    let c = dir.path().join("c");
    assert!(run("gen", &cfg, &c, &["--seed", "9"]).status.success());
    assert_ne!(fs::read(a.join(TRAIN_CSV)).unwrap(), fs::read(c.join(TRAIN_CSV)).unwrap());
}

#[test]
fn config_errors_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TOY.replace("groups = 5", "groups = 5\ngropus = 5");
    let o = run("gen", &write_config(dir.path(), &bad), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("gropus") && msg.contains("run.toml:8:"), "{msg}");

    let missing = format!("[data]\ntrain = \"nope.csv\"\ntest = \"nope.csv\"\n{}", &TOY[TOY.find("[eval]").unwrap()..]);
    let o = run("pipeline", &write_config(dir.path(), &missing), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nope.csv"));

    let o = run("pipeline", &write_config(dir.path(), TOY), dir.path(), &["--stage", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hrc(&["gen", "--config", write_config(dir.path(), TOY).to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "no output directory");
}

#[test]
fn stage_failure_exits_3_naming_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let o = run("cluster", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage cluster"), "{}", stderr(&o));

    // Budgets below the cheapest allocation cannot be served.
    let cheap = write_config(dir.path(), &TOY.replace("[0.3, 0.35, 0.4, 0.45, 0.5]", "[0.001]"));
    let o = run("pipeline", &cheap, &dir.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage eval"), "{}", stderr(&o));
}

#[test]
fn toy_pipeline_is_fast_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out = dir.path().join("run");
    let start = Instant::now();
    let o = run("pipeline", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);
    for name in [REPNET, CLUSTERS, LIBRARY, CLASSIFIER, EVAL_CSV, MANIFEST] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let manifest = Manifest::load(&out).unwrap();
    manifest.verify(&out).unwrap();
    let first = fs::read(out.join(MANIFEST)).unwrap();

    // Re-running skips everything and leaves the manifest unchanged.
    let o = run("pipeline", &cfg, &out, &[]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().all(|l| l.ends_with("up to date")), "{text}");
    assert_eq!(fs::read(out.join(MANIFEST)).unwrap(), first);

    // A deleted intermediate is rebuilt byte-identically and nothing after
    // it needs to run again.
    fs::remove_file(out.join(CLUSTERS)).unwrap();
    let o = run("pipeline", &cfg, &out, &[]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("cluster: done") && text.contains("solve: up to date") && text.contains("train: up to date"), "{text}");
    assert_eq!(fs::read(out.join(MANIFEST)).unwrap(), first);

    // A fresh directory reproduces every artifact.
    let again = dir.path().join("again");
    assert!(run("pipeline", &cfg, &again, &[]).status.success());
    for (_, rec) in &manifest.stages {
        for name in rec.outputs.keys() {
            assert_eq!(fs::read(out.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
        }
    }

    // Tampering breaks verification.
    fs::write(out.join(LIBRARY), "{}").unwrap();
    assert!(Manifest::load(&out).unwrap().verify(&out).is_err());
}

#[test]
fn compare_reports_each_family_per_budget() {
    let dir = tempfile::tempdir().unwrap();
    let two = TOY.replace("budgets = [0.3, 0.35, 0.4, 0.45, 0.5]", "budgets = [0.3, 0.4, 0.5]\nfamilies = [\"hrc\", \"lagrangian\"]");
    let cfg = write_config(dir.path(), &two);
    let out = dir.path().join("run");
    let o = run("pipeline", &cfg, &out, &["--stage", "compare"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join(COMPARE_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("family,budget,revenue,revenue_se,cost,cost_se"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.len() == 6 && r[2..].iter().all(|v| v.parse::<f64>().is_ok())));
    for budget in ["0.3", "0.4", "0.5"] {
        let fams: Vec<&str> = rows.iter().filter(|r| r[1] == budget).map(|r| r[0]).collect();
        assert_eq!(fams, ["hrc", "lagrangian"]);
    }
    let report: Report = read_json(&out.join(COMPARE_JSON)).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert_eq!(report.winners.len(), 3);

    // The standalone command reuses the current artifacts.
    let o = run("compare", &cfg, &out, &[]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "compare: up to date");
}
