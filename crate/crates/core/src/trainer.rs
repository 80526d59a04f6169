//! Mini-batch training with Adam, optional back-propagation pretraining and
//! early stopping on validation accuracy.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSplit, Split};
use crate::diagnostics::spectral::DEFAULT_MAX_ITERS;
use crate::diagnostics::SpectralTracker;
use crate::error::{Error, Result};
use crate::network::{argmax_rows, forward, init_params, Architecture, InitScheme, NetworkParams};
use crate::objectives::{draw_auxiliary, evaluate_and_grad, ObjectiveSpec, Variant};
use crate::potential::potential_value;

/// Relative tolerance of the per-epoch spectral norm estimates.
pub const LIPSCHITZ_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Epochs with the main objective (after any pretraining).
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Back-propagation epochs run before switching to the main objective.
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub init: InitScheme,
    /// Track the spectral-norm product every epoch.
    pub track_lipschitz: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 100,
            lr: 2e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            pretrain_epochs: 0,
            seed: 0,
            init: InitScheme::KaimingUniform,
            track_lipschitz: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidSpec(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be at least 1".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidSpec("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub t: u64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &NetworkParams, betas: (f64, f64), eps: f64) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            betas,
            eps,
        }
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut NetworkParams, grad: &NetworkParams, lr: f64) {
    let (b1, b2) = state.betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let eps = state.eps;
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grad.values())
        .zip(state.m.values_mut())
        .zip(state.v.values_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
}

/// Rows evaluated per forward call when measuring accuracy.
const EVAL_CHUNK: usize = 2000;

/// Accuracy of the plain forward pass (argmax, lowest index on ties).
pub fn evaluate_accuracy(params: &NetworkParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let x = data.images.slice(ndarray::s![start..end, ..]);
        let out = forward(params, &x)?;
        hits += argmax_rows(out.output())
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Main,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based over pretraining and main epochs together.
    pub epoch: usize,
    pub phase: Phase,
    /// Mean training objective over the processed batches.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub lipschitz: Option<f64>,
    pub skipped_batches: usize,
    pub wall_seconds: f64,
}

impl PartialEq for EpochRecord {
    /// Ignores wall time.
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.phase == other.phase
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.train_accuracy == other.train_accuracy
            && self.val_accuracy == other.val_accuracy
            && self.test_accuracy == other.test_accuracy
            && self.lipschitz.map(f64::to_bits) == other.lipschitz.map(f64::to_bits)
            && self.skipped_batches == other.skipped_batches
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: Variant,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest validation accuracy among main-phase epochs
    /// (earliest on ties); 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_test_accuracy: f64,
    /// Last pretraining epoch, if any.
    pub handoff_epoch: Option<usize>,
    /// Adam moments are re-initialized when the objective changes.
    pub adam_reset_at_handoff: bool,
    pub skipped_batches: usize,
}

impl TrainReport {
    /// Writes `epoch,split,metric,value` rows.
    pub fn write_metrics_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,split,metric,value")?;
        for r in &self.epochs {
            let e = r.epoch;
            writeln!(out, "{e},train,loss,{}", r.train_loss)?;
            writeln!(out, "{e},train,accuracy,{}", r.train_accuracy)?;
            writeln!(out, "{e},val,accuracy,{}", r.val_accuracy)?;
            writeln!(out, "{e},test,accuracy,{}", r.test_accuracy)?;
            if let Some(l) = r.lipschitz {
                writeln!(out, "{e},model,lipschitz,{l}")?;
            }
            writeln!(out, "{e},train,skipped_batches,{}", r.skipped_batches)?;
            writeln!(out, "{e},run,wall_seconds,{}", r.wall_seconds)?;
        }
        Ok(())
    }
}

fn batch(split: &Split, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
    (
        split.data.images.select(Axis(0), idx),
        split.targets.select(Axis(0), idx),
    )
}

/// Trains from `init_params(arch, tc.seed, tc.init)`.
pub fn train(
    arch: &Architecture,
    obj: &ObjectiveSpec,
    tc: &TrainConfig,
    data: &DatasetSplit,
) -> Result<(NetworkParams, TrainReport)> {
    arch.validate()?;
    let params = init_params(arch, tc.seed, tc.init);
    train_from(params, obj, tc, data)
}

/// Trains starting from given parameters.
pub fn train_from(
    mut params: NetworkParams,
    obj: &ObjectiveSpec,
    tc: &TrainConfig,
    data: &DatasetSplit,
) -> Result<(NetworkParams, TrainReport)> {
    tc.validate()?;
    obj.validate(params.arch())?;
    let arch = params.arch().clone();
    if data.train.data.dim() != arch.input_dim() || data.train.targets.ncols() != arch.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "dataset versus architecture",
            expected: arch.input_dim(),
            actual: data.train.data.dim(),
        });
    }
    if data.train_indices.iter().any(|i| data.val_indices.contains(i)) {
        return Err(Error::InvalidSpec("train and validation sets overlap".into()));
    }

    let backprop = ObjectiveSpec::new(Variant::Backprop);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut aux_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    aux_rng.set_stream(1);
    let mut tracker = SpectralTracker::new(LIPSCHITZ_TOL, DEFAULT_MAX_ITERS);
    let mut adam = AdamState::new(&params, tc.adam_betas, tc.adam_eps);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::new();
    let mut skipped_total = 0;
    let total = tc.pretrain_epochs + tc.epochs;

    for epoch in 1..=total {
        let phase = if epoch <= tc.pretrain_epochs { Phase::Pretrain } else { Phase::Main };
        if phase == Phase::Main && epoch == tc.pretrain_epochs + 1 && tc.pretrain_epochs > 0 {
            adam = AdamState::new(&params, tc.adam_betas, tc.adam_eps);
            log::info!("handoff to {:?} after epoch {}", obj.variant, tc.pretrain_epochs);
        }
        let spec = if phase == Phase::Pretrain { &backprop } else { obj };
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut skipped = 0;
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            let (x, y) = batch(&data.train, idx);
            let aux = draw_auxiliary(spec, &arch, &y.view(), &mut aux_rng);
            match evaluate_and_grad(spec, &params, &x.view(), &y.view(), &aux) {
                Ok(ev) if ev.loss.is_finite() && ev.grad.is_finite() => {
                    adam_step(&mut adam, &mut params, &ev.grad, tc.lr);
                    loss_sum += ev.loss;
                    batches += 1;
                }
                Ok(_) => {
                    log::warn!("epoch {epoch} batch {b}: non-finite loss or gradient, batch skipped");
                    skipped += 1;
                }
                Err(e) => {
                    log::warn!("epoch {epoch} batch {b}: {e}, batch skipped");
                    skipped += 1;
                }
            }
        }
        skipped_total += skipped;
        debug_assert!(free_phase_vanishes(&params, obj, &data.train.data.images.view()));
        let record = EpochRecord {
            epoch,
            phase,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            train_accuracy: evaluate_accuracy(&params, &data.train.data)?,
            val_accuracy: evaluate_accuracy(&params, &data.val.data)?,
            test_accuracy: evaluate_accuracy(&params, &data.test.data)?,
            lipschitz: tc.track_lipschitz.then(|| tracker.estimate(&params).product),
            skipped_batches: skipped,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} ({phase:?}): loss {:.5} train {:.4} val {:.4} test {:.4}",
            record.train_loss,
            record.train_accuracy,
            record.val_accuracy,
            record.test_accuracy
        );
        epochs.push(record);
        if !params.is_finite() {
            return Err(Error::Diverged { sweep: epoch });
        }
    }

    let first_candidate = if tc.epochs > 0 { tc.pretrain_epochs } else { 0 };
    let mut best: Option<&EpochRecord> = None;
    for r in &epochs[first_candidate..] {
        if best.is_none_or(|b| r.val_accuracy > b.val_accuracy) {
            best = Some(r);
        }
    }
    let report = TrainReport {
        objective: obj.variant,
        best_epoch: best.map_or(0, |r| r.epoch),
        best_val_accuracy: best.map_or(f64::NAN, |r| r.val_accuracy),
        best_test_accuracy: best.map_or(f64::NAN, |r| r.test_accuracy),
        handoff_epoch: (tc.pretrain_epochs > 0).then_some(tc.pretrain_epochs),
        adam_reset_at_handoff: true,
        skipped_batches: skipped_total,
        epochs,
    };
    Ok((params, report))
}

/// `min_z U = 0` at the forward pass, checked on a few rows.
fn free_phase_vanishes(params: &NetworkParams, obj: &ObjectiveSpec, x: &ArrayView2<f64>) -> bool {
    let rows = x.nrows().min(8);
    let Ok(spec) = obj.potential(params.arch()) else {
        return true;
    };
    match forward(params, &x.slice(ndarray::s![..rows, ..])) {
        Ok(state) => potential_value(params, &spec, &state).is_ok_and(|u| u == 0.0),
        Err(_) => false,
    }
}
