use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lifted(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lifted"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synthetic_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"
name = "smoke"
output_dir = "{out}"
seeds = [3, 4]

[data]
source = "synthetic"
n_train = 120
n_val = 60
synthetic = {{ num_classes = 3, dim = 8, n_pool = 240, n_test = 50, spread = 0.2, seed = 1 }}

[arch]
hidden = [12]

[train]
epochs = 3
batch_size = 20
lr = 1e-2

{extra}
"#,
        out = dir.join("out").display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

const RUNS: &str = r#"
[[runs]]
name = "bp"
objective = { variant = "backprop" }

[[runs]]
name = "arovr"
pretrain_epochs = 1
objective = { variant = "arovr", beta = 0.25 }

[[runs]]
name = "arovr_ab_g"
objective = { variant = "targeted_arovr_g" }
"#;

#[test]
fn propcheck_prop3_passes() {
    let o = lifted(&["propcheck", "--suite", "prop3", "--trials", "500", "--seed", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS prop3"));
}

#[test]
fn non_interpolating_prop2_is_skipped_not_failed() {
    let o = lifted(&["propcheck", "--suite", "prop2", "--trials", "20", "--non-interpolating"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("0 passed, 0 failed, 20 skipped"), "{out}");
    assert!(out.contains("precondition unmet"), "{out}");
}

#[test]
fn propcheck_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let o = lifted(&["propcheck", "--suite", "all", "--trials", "40", "--seed", "9", "--csv", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stdout(&o));
    }
    let ca = fs::read_to_string(&a).unwrap();
    assert_eq!(ca, fs::read_to_string(&b).unwrap());
    assert!(ca.starts_with("suite,trials,passed,failed,skipped,worst_margin,worst_seed,tolerance\n"));
    assert_eq!(ca.lines().count(), 8);
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let o = lifted(&["propcheck", "--suite", "prop9"]);
    assert!(!o.status.success());
}

#[test]
fn missing_dataset_directory_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        format!(
            "name = \"x\"\noutput_dir = \"{}\"\n[data]\ndir = \"/nonexistent/mnist\"\n[[runs]]\nname = \"bp\"\n",
            dir.path().join("out").display()
        ),
    )
    .unwrap();
    let o = lifted(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("data.dir"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists(), "nothing is written before validation passes");
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), RUNS);
    let o = lifted(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    let out = dir.path().join("out");
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seeds = [3, 4]"), "{resolved}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3 * 2);
    for run in ["bp", "arovr", "arovr_ab_g"] {
        for seed in [3, 4] {
            let d = out.join(run).join(format!("seed{seed}"));
            let metrics = fs::read_to_string(d.join("metrics.csv")).unwrap();
            assert!(metrics.starts_with("epoch,split,metric,value\n"));
            assert!(metrics.contains(",val,accuracy,"));
            let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
            assert_eq!(report["seed"], seed);
            assert!(report["provenance"]["subset_seed"].is_u64());
            assert!(d.join("final.ckpt").is_file());
        }
    }
    let arovr: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("arovr/seed3/report.json")).unwrap()).unwrap();
    assert_eq!(arovr["report"]["handoff_epoch"], 1);
    assert_eq!(arovr["report"]["epochs"].as_array().unwrap().len(), 4);
}

#[test]
fn train_is_deterministic() {
    let run = |dir: &Path| {
        let cfg = synthetic_config(dir, RUNS);
        let o = lifted(&["train", "--config", cfg.to_str().unwrap()]);
        assert!(o.status.success());
        fs::read_to_string(dir.join("out/summary.csv")).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn trace_without_loss_has_zero_residual() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "[[runs]]\nname = \"bp\"\nobjective = { variant = \"backprop\" }\n");
    let o = lifted(&["infer-trace", "--config", cfg.to_str().unwrap(), "--sample", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sweep,objective,residual"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 21);
    for r in rows {
        assert_eq!(r.split(',').nth(2), Some("0"), "{r}");
    }
}

#[test]
fn trace_rejects_out_of_range_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), RUNS);
    let o = lifted(&["infer-trace", "--config", cfg.to_str().unwrap(), "--sample", "50"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("out of range"), "{}", stderr(&o));
}

#[test]
fn trace_far_above_safe_bound_ends_with_divergence_marker() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#"
[[runs]]
name = "arovr"
objective = { variant = "arovr", beta = 0.95 }

[trace]
sweeps = 3000
"#;
    let cfg = synthetic_config(dir.path(), extra);
    // linear hidden layer with large weights
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("hidden = [12]", "hidden = [12]\nhidden_activation = \"linear\"")
        .replace("lr = 1e-2", "lr = 1e-2\ninit = { kind = \"gaussian\", sigma = 1.5 }");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("trace.csv");
    let o = lifted(&[
        "infer-trace",
        "--config",
        cfg.to_str().unwrap(),
        "--sample",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out).unwrap();
    assert_eq!(csv.lines().last(), Some("diverged,NaN,NaN"));
}

#[test]
fn trace_of_second_phase() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), RUNS);
    let text = fs::read_to_string(&cfg).unwrap() + "\n[trace]\nrun = \"arovr_ab_g\"\n";
    fs::write(&cfg, text).unwrap();
    let o = lifted(&["infer-trace", "--config", cfg.to_str().unwrap(), "--sample", "1", "--phase", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 22);
    let bad = lifted(&["infer-trace", "--config", cfg.to_str().unwrap(), "--sample", "1", "--phase", "2"]);
    assert!(!bad.status.success());
}

#[test]
fn presets_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = lifted_cli::config::ExperimentConfig::load(&path).unwrap();
        let arch = cfg.arch.build(784, 10).unwrap();
        for run in &cfg.runs {
            run.objective.validate(&arch).unwrap();
            cfg.train_config(run, 0).validate().unwrap();
        }
        n += 1;
    }
    assert_eq!(n, 3);
}
