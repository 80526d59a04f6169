//! Implementations of the `train`, `propcheck` and `infer-trace` commands.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use lifted_core::checkpoint::{load_checkpoint, save_checkpoint};
use lifted_core::data::{encode_targets, load_mnist_dir, make_split, synthetic_pool, verify_mnist, DataPool, DatasetSplit, Provenance};
use lifted_core::diagnostics::{check_propositions, lipschitz_estimate, write_reports_csv, PropReport, SuiteConfig};
use lifted_core::inference::{infer_traced, LossTerm};
use lifted_core::network::init_params;
use lifted_core::objectives::{draw_auxiliary, phase_losses};
use lifted_core::trainer::{train, TrainReport};

use crate::config::{DataSource, ExperimentConfig};

pub fn load_pool(cfg: &ExperimentConfig) -> Result<DataPool> {
    match cfg.data.source {
        DataSource::Mnist => {
            let dir = cfg.data_dir()?;
            let pool = load_mnist_dir(&dir).with_context(|| format!("data.dir: loading {}", dir.display()))?;
            for file in verify_mnist(&pool.files) {
                log::warn!("{file}: checksum differs from the published MNIST file");
            }
            Ok(pool)
        }
        DataSource::Synthetic => {
            let s = &cfg.data.synthetic;
            Ok(synthetic_pool(s.num_classes, s.dim, s.n_pool, s.n_test, s.spread, s.seed))
        }
    }
}

#[derive(Serialize)]
struct RunArtifact<'a> {
    run: &'a str,
    seed: u64,
    provenance: &'a Provenance,
    final_lipschitz: f64,
    report: &'a TrainReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_test_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_lipschitz: f64,
    pub skipped_batches: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

/// Runs every configured objective for every seed. Returns the per-run
/// summaries; a run that fails numerically is logged and makes the command
/// fail after the remaining runs finish.
pub fn cmd_train(config_path: &Path) -> Result<Vec<RunSummary>> {
    let cfg = ExperimentConfig::load(config_path)?;
    cfg.validate()?;
    let resolved = cfg.resolved()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("output_dir: creating {}", out.display()))?;
    fs::write(out.join("config.resolved.toml"), resolved.to_toml()?)?;

    let pool = load_pool(&cfg)?;
    let (input, output) = (pool.train.images.ncols(), pool.train.num_classes);
    let arch = cfg.arch.build(input, output)?;
    let mut splits: BTreeMap<u64, DatasetSplit> = BTreeMap::new();
    let mut summaries = Vec::new();
    let mut failures = Vec::new();

    for run in &cfg.runs {
        for &seed in &cfg.seeds {
            let subset_seed = cfg.data.subset_seed.unwrap_or(seed);
            if !splits.contains_key(&subset_seed) {
                let split = make_split(&pool, cfg.data.n_train, cfg.data.n_val, subset_seed, cfg.data.target_scale)?;
                splits.insert(subset_seed, split);
            }
            let split = &splits[&subset_seed];
            let tc = cfg.train_config(run, seed);
            log::info!("run {} seed {seed}: {:?}", run.name, run.objective.variant);
            let (params, report) = match train(&arch, &run.objective, &tc, split) {
                Ok(r) => r,
                Err(e) => {
                    log::error!("run {} seed {seed} failed: {e}", run.name);
                    failures.push(format!("{}/seed{seed}: {e}", run.name));
                    continue;
                }
            };
            let dir = out.join(&run.name).join(format!("seed{seed}"));
            fs::create_dir_all(&dir)?;
            report.write_metrics_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
            let final_lipschitz = lipschitz_estimate(&params);
            write_json(
                &dir.join("report.json"),
                &RunArtifact {
                    run: &run.name,
                    seed,
                    provenance: &split.provenance,
                    final_lipschitz,
                    report: &report,
                },
            )?;
            if cfg.save_checkpoints {
                save_checkpoint(&params, BufWriter::new(File::create(dir.join("final.ckpt"))?))?;
            }
            let last = report.epochs.last();
            summaries.push(RunSummary {
                run: run.name.clone(),
                seed,
                best_epoch: report.best_epoch,
                best_val_accuracy: report.best_val_accuracy,
                best_test_accuracy: report.best_test_accuracy,
                final_test_accuracy: last.map_or(f64::NAN, |r| r.test_accuracy),
                final_lipschitz,
                skipped_batches: report.skipped_batches,
            });
        }
    }

    let mut csv = BufWriter::new(File::create(out.join("summary.csv"))?);
    writeln!(
        csv,
        "run,seed,best_epoch,best_val_accuracy,best_test_accuracy,final_test_accuracy,final_lipschitz,skipped_batches"
    )?;
    for s in &summaries {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            s.run,
            s.seed,
            s.best_epoch,
            s.best_val_accuracy,
            s.best_test_accuracy,
            s.final_test_accuracy,
            s.final_lipschitz,
            s.skipped_batches
        )?;
    }
    csv.flush()?;
    write_json(&out.join("summary.json"), &summaries)?;

    println!("{:<24} {:>6} {:>18}", "run", "seeds", "test accuracy (%)");
    for run in &cfg.runs {
        let acc: Vec<f64> = summaries
            .iter()
            .filter(|s| s.run == run.name)
            .map(|s| 100.0 * s.best_test_accuracy)
            .collect();
        if acc.is_empty() {
            println!("{:<24} {:>6} {:>18}", run.name, 0, "failed");
            continue;
        }
        let (m, sd) = mean_std(&acc);
        println!("{:<24} {:>6} {:>11.2} ± {:.2}", run.name, acc.len(), m, sd);
    }
    println!("artifacts in {}", out.display());
    if !failures.is_empty() {
        bail!("{} run(s) failed: {}", failures.len(), failures.join("; "));
    }
    Ok(summaries)
}

/// Prints one summary line per suite; returns whether every suite passed.
pub fn cmd_propcheck(suite_cfg: &SuiteConfig, csv_out: Option<&Path>) -> Result<(bool, Vec<PropReport>)> {
    let reports = check_propositions(suite_cfg);
    for r in &reports {
        println!("{} {}", if r.ok() { "PASS" } else { "FAIL" }, r.summary());
    }
    if let Some(p) = csv_out {
        write_reports_csv(&reports, BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))?;
    }
    Ok((reports.iter().all(PropReport::ok), reports))
}

/// Traces block-coordinate inference on test sample `sample` and writes
/// `sweep,objective,residual` rows to `out`.
pub fn cmd_infer_trace<W: Write>(config_path: &Path, sample: usize, phase: usize, out: W) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    cfg.validate()?;
    let pool = load_pool(&cfg)?;
    let test = &pool.test;
    if sample >= test.len() {
        bail!("sample {sample} out of range: the test set has {} samples", test.len());
    }
    let arch = cfg.arch.build(test.images.ncols(), test.num_classes)?;
    let run = match &cfg.trace.run {
        Some(name) => cfg.runs.iter().find(|r| &r.name == name).expect("validated"),
        None => &cfg.runs[0],
    };
    let params = match &cfg.trace.checkpoint {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("trace.checkpoint: opening {}", p.display()))?;
            let params = load_checkpoint(BufReader::new(f)).with_context(|| format!("trace.checkpoint: {}", p.display()))?;
            if params.arch() != &arch {
                bail!("trace.checkpoint: architecture differs from the configured one");
            }
            params
        }
        None => init_params(&arch, cfg.seeds[0], cfg.train.init),
    };
    let mut obj = run.objective.clone();
    if let Some(s) = cfg.trace.sweeps {
        obj.inference.sweeps = s;
    }
    let x = test.images.slice(s![sample..sample + 1, ..]).to_owned();
    let y = encode_targets(&test.labels[sample..sample + 1], test.num_classes, cfg.data.target_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
    let aux = draw_auxiliary(&obj, &arch, &y.view(), &mut rng);
    let mut losses = phase_losses(&obj, &params, &x.view(), &y.view(), &aux)?;
    if losses.is_empty() {
        losses.push(LossTerm::none());
    }
    let n = losses.len();
    let loss = losses
        .get(phase)
        .ok_or_else(|| anyhow!("phase {phase} out of range: {:?} has {n} phase(s)", obj.variant))?;
    let pot = obj.potential(&arch)?;
    let trace = infer_traced(&params, &pot, &obj.inference, &x.view(), loss);
    trace.write_csv(out)?;
    if let Err(e) = &trace.result {
        log::warn!("inference diverged: {e}");
    }
    Ok(())
}

