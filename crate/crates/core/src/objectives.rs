//! Training objectives: back-propagation, ROVR / AROVR and their targeted
//! two-phase variants.
//!
//! Every contrastive objective is evaluated from one or two inference phases
//! `z = argmin_z U(z) + h(z)` and differentiated in envelope form, i.e. only
//! through `dU/dtheta` at the inferred states. The free phase `min_z U = 0`
//! vanishes identically and is never computed.
//!
//! Losses and gradients are means over the batch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{residual, sq_dist, InferenceConfig, LossTerm, Solver};
use crate::network::{argmax_rows, forward, Architecture, NetworkParams};
use crate::potential::{potential_grad_theta, potential_value, PotentialSpec};

/// Residual below which a phase is reported as converged.
pub const CONVERGENCE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Backprop,
    Rovr,
    Arovr,
    TargetedRovr,
    TargetedArovr,
    #[serde(rename = "targeted_arovr_g")]
    TargetedArovrG,
}

impl Variant {
    pub fn is_targeted(self) -> bool {
        matches!(self, Variant::TargetedRovr | Variant::TargetedArovr | Variant::TargetedArovrG)
    }

    pub fn is_contrastive(self) -> bool {
        self != Variant::Backprop
    }
}

/// Distribution of the linear perturbation `g` added to the potential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GDist {
    None,
    /// i.i.d. `N(0, sigma^2)` entries.
    Gaussian { sigma: f64 },
    /// Entries equal to `m` with probability `p`, else 0.
    DropoutLike { p: f64, m: f64 },
}

impl GDist {
    fn validate(&self) -> Result<()> {
        match *self {
            GDist::None => Ok(()),
            GDist::Gaussian { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            GDist::DropoutLike { p, m } if (0.0..=1.0).contains(&p) && m.is_finite() => Ok(()),
            other => Err(Error::InvalidSpec(format!("invalid g distribution {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvLabelPolicy {
    /// Uniform over the classes other than the true one. The random stream
    /// is owned by the caller (the trainer seeds it from the run seed).
    #[default]
    RandomWrong,
}

/// What plays the role of the adversarial loss `l-` in the targeted variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialLoss {
    /// Euclidean loss towards a wrong label `y-`.
    #[default]
    Target,
    /// `l- = 0`.
    Zero,
    /// `l- = -l`, the untargeted attack.
    NegatedTrue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    pub beta: f64,
    /// Weight of the true loss in the targeted variants.
    pub alpha: f64,
    /// Per-layer potential weights; `None` means all ones.
    pub gamma: Option<Vec<f64>>,
    pub g_dist: GDist,
    pub adv_label_policy: AdvLabelPolicy,
    pub adversarial_loss: AdversarialLoss,
    /// Replace `l` by its linearization at the forward pass (ROVR / AROVR only).
    pub linearized_loss: bool,
    /// Permit `alpha >= 1/2` for the adversarial targeted variants.
    pub allow_unsafe_alpha: bool,
    pub inference: InferenceConfig,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Backprop,
            beta: 0.25,
            alpha: 0.49,
            gamma: None,
            g_dist: GDist::Gaussian { sigma: 0.25 },
            adv_label_policy: AdvLabelPolicy::RandomWrong,
            adversarial_loss: AdversarialLoss::Target,
            linearized_loss: false,
            allow_unsafe_alpha: false,
            inference: InferenceConfig::default(),
        }
    }
}

impl ObjectiveSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        self.inference.validate()?;
        self.potential(arch)?;
        if self.variant == Variant::Backprop {
            return Ok(());
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidSpec(format!("beta must be positive, got {}", self.beta)));
        }
        if self.variant.is_targeted() {
            if !(self.alpha > 0.0 && self.alpha < 1.0) {
                return Err(Error::InvalidSpec(format!("alpha must lie in (0, 1), got {}", self.alpha)));
            }
            let adversarial = matches!(self.variant, Variant::TargetedArovr | Variant::TargetedArovrG);
            if adversarial && self.alpha >= 0.5 && !self.allow_unsafe_alpha {
                return Err(Error::InvalidSpec(format!(
                    "alpha = {} >= 1/2 loses strong convexity of the attack loss; set allow_unsafe_alpha",
                    self.alpha
                )));
            }
        }
        if self.linearized_loss && !matches!(self.variant, Variant::Rovr | Variant::Arovr) {
            return Err(Error::InvalidSpec("linearized_loss applies to ROVR and AROVR only".into()));
        }
        self.g_dist.validate()
    }

    pub fn potential(&self, arch: &Architecture) -> Result<PotentialSpec> {
        match &self.gamma {
            Some(g) => PotentialSpec::weighted(arch, g.clone()),
            None => Ok(PotentialSpec::for_arch(arch)),
        }
    }

    pub fn needs_adv_labels(&self) -> bool {
        self.variant.is_targeted() && self.adversarial_loss == AdversarialLoss::Target
    }

    pub fn needs_g(&self) -> bool {
        self.variant == Variant::TargetedArovrG && self.g_dist != GDist::None
    }
}

/// Random inputs of one objective evaluation, drawn once per mini-batch.
#[derive(Clone, Debug, Default)]
pub struct Auxiliary {
    pub adv_target: Option<Array2<f64>>,
    /// One `batch x d_k` matrix per layer.
    pub g: Option<Vec<Array2<f64>>>,
}

/// One-hot target of a wrong class, scaled like `y`.
pub fn adversarial_label<R: Rng + ?Sized>(
    policy: AdvLabelPolicy,
    y: ArrayView1<f64>,
    num_classes: usize,
    rng: &mut R,
) -> Array1<f64> {
    assert!(num_classes >= 2, "adversarial labels need at least two classes");
    let mut truth = 0;
    for (j, &v) in y.iter().enumerate() {
        if v > y[truth] {
            truth = j;
        }
    }
    let scale = y[truth];
    let wrong = match policy {
        AdvLabelPolicy::RandomWrong => {
            let r = rng.random_range(0..num_classes - 1);
            if r >= truth {
                r + 1
            } else {
                r
            }
        }
    };
    let mut out = Array1::zeros(num_classes);
    out[wrong] = scale;
    out
}

pub fn sample_g<R: Rng + ?Sized>(dist: GDist, shape: (usize, usize), rng: &mut R) -> Array2<f64> {
    match dist {
        GDist::None => Array2::zeros(shape),
        GDist::Gaussian { sigma } => {
            if sigma == 0.0 {
                return Array2::zeros(shape);
            }
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            Array2::from_shape_simple_fn(shape, || normal.sample(rng))
        }
        GDist::DropoutLike { p, m } => Array2::from_shape_simple_fn(shape, || if rng.random_bool(p) { m } else { 0.0 }),
    }
}

/// Draws whatever random inputs `spec` requires for a batch with targets `y`.
pub fn draw_auxiliary<R: Rng + ?Sized>(
    spec: &ObjectiveSpec,
    arch: &Architecture,
    y: &ArrayView2<f64>,
    rng: &mut R,
) -> Auxiliary {
    let mut aux = Auxiliary::default();
    if spec.needs_adv_labels() {
        let c = y.ncols();
        let mut t = Array2::zeros(y.raw_dim());
        for (i, row) in y.rows().into_iter().enumerate() {
            t.row_mut(i).assign(&adversarial_label(spec.adv_label_policy, row, c, rng));
        }
        aux.adv_target = Some(t);
    }
    if spec.needs_g() {
        let b = y.nrows();
        aux.g = Some(
            arch.layer_dims()[1..]
                .iter()
                .map(|&d| sample_g(spec.g_dist, (b, d), rng))
                .collect(),
        );
    }
    aux
}

#[derive(Clone, Debug)]
pub struct PhaseResult {
    pub state: crate::network::ActivationState,
    /// Batch-summed `U(z) + h(z)` at the returned state.
    pub objective_value: f64,
    pub converged: bool,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Batch-mean loss.
    pub loss: f64,
    /// Batch-mean gradient.
    pub grad: NetworkParams,
    pub phases: Vec<PhaseResult>,
}

/// Euclidean loss `|z - y|^2 / 2` and reverse-mode gradient, both batch means.
pub fn backprop_grad(params: &NetworkParams, x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<(f64, NetworkParams)> {
    let state = forward(params, x)?;
    check_targets(params, y, state.batch_size())?;
    let l = params.num_layers();
    let n = state.batch_size() as f64;
    let y = y.to_owned();
    let loss = 0.5 * sq_dist(state.output(), &y) / n;
    let mut grad = params.zeros_like();
    let mut delta = state.output() - &y;
    for k in (1..=l).rev() {
        let act = params.arch().activation(k);
        let a = params.pre_activation(k, &state.z(k - 1));
        Zip::from(&mut delta).and(&a).for_each(|d, &a| *d *= act.derivative(a));
        grad.weights[k - 1] = delta.t().dot(&state.z(k - 1)) / n;
        if let Some(bs) = grad.biases.as_mut() {
            bs[k - 1] = delta.sum_axis(Axis(0)) / n;
        }
        if k > 1 {
            delta = delta.dot(params.weight_into(k));
        }
    }
    Ok((loss, grad))
}

fn check_targets(params: &NetworkParams, y: &ArrayView2<f64>, batch: usize) -> Result<()> {
    let c = params.arch().output_dim();
    if y.dim() != (batch, c) {
        return Err(Error::DimensionMismatch {
            context: "target shape",
            expected: batch * c,
            actual: y.len(),
        });
    }
    Ok(())
}

fn run_phase(
    solver: &Solver,
    params: &NetworkParams,
    spec: &PotentialSpec,
    x: &ArrayView2<f64>,
    loss: &LossTerm,
) -> Result<PhaseResult> {
    let state = solver.solve(params, spec, x, loss)?;
    let objective_value = potential_value(params, spec, &state)? + loss.value(&state);
    let res = residual(params, spec, &state, loss)?;
    Ok(PhaseResult {
        state,
        objective_value,
        converged: res < CONVERGENCE_TOL && objective_value.is_finite(),
        residual: res,
    })
}

/// Evaluates the objective with block-coordinate inference configured by
/// `spec.inference`.
pub fn evaluate_and_grad(
    spec: &ObjectiveSpec,
    params: &NetworkParams,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    aux: &Auxiliary,
) -> Result<Evaluation> {
    evaluate_with(spec, &Solver::Bcd(spec.inference), params, x, y, aux)
}

/// Same as [`evaluate_and_grad`] with an explicit inference solver.
pub fn evaluate_with(
    spec: &ObjectiveSpec,
    solver: &Solver,
    params: &NetworkParams,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    aux: &Auxiliary,
) -> Result<Evaluation> {
    spec.validate(params.arch())?;
    check_targets(params, y, x.nrows())?;
    if spec.variant == Variant::Backprop {
        let (loss, grad) = backprop_grad(params, x, y)?;
        return Ok(Evaluation {
            loss,
            grad,
            phases: Vec::new(),
        });
    }
    let pot = spec.potential(params.arch())?;
    let n = x.nrows() as f64;
    let beta = spec.beta;
    let y_own = y.to_owned();
    let ell = |s: &crate::network::ActivationState| 0.5 * sq_dist(s.output(), &y_own);
    let mut terms = phase_losses(spec, params, x, y, aux)?;

    match spec.variant {
        Variant::Rovr | Variant::Arovr => {
            let sign = if spec.variant == Variant::Rovr { 1.0 } else { -1.0 };
            let term = terms.pop().expect("one phase");
            let phase = run_phase(solver, params, &pot, x, &term)?;
            let u = potential_value(params, &pot, &phase.state)?;
            let data_term = if spec.linearized_loss {
                let fwd = forward(params, x)?;
                let g = fwd.output() - &y_own;
                ell(&fwd) + (&g * &(phase.state.output() - fwd.output())).sum()
            } else {
                ell(&phase.state)
            };
            let loss = (data_term + sign * u / beta) / n;
            let mut grad = potential_grad_theta(params, &pot, &phase.state)?;
            grad.scale(sign / (beta * n));
            Ok(Evaluation {
                loss,
                grad,
                phases: vec![phase],
            })
        }
        _ => {
            let second = terms.pop().expect("two phases");
            let first = terms.pop().expect("two phases");
            let p1 = run_phase(solver, params, &pot, x, &first)?;
            let p2 = run_phase(solver, params, &pot, x, &second)?;
            let scale = 1.0 / (spec.alpha * beta * n);
            let loss = (p1.objective_value - p2.objective_value) * scale;
            let mut grad = potential_grad_theta(params, &pot, &p1.state)?;
            grad.add_scaled(-1.0, &potential_grad_theta(params, &pot, &p2.state)?);
            grad.scale(scale);
            Ok(Evaluation {
                loss,
                grad,
                phases: vec![p1, p2],
            })
        }
    }
}

/// Loss terms `h` of the inference phases of `spec` in evaluation order.
/// Back-propagation has none.
pub fn phase_losses(
    spec: &ObjectiveSpec,
    params: &NetworkParams,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    aux: &Auxiliary,
) -> Result<Vec<LossTerm>> {
    check_targets(params, y, x.nrows())?;
    let beta = spec.beta;
    let y_own = y.to_owned();
    match spec.variant {
        Variant::Backprop => Ok(Vec::new()),
        Variant::Rovr | Variant::Arovr => {
            let sign = if spec.variant == Variant::Rovr { 1.0 } else { -1.0 };
            let term = if spec.linearized_loss {
                let fwd = forward(params, x)?;
                let g = fwd.output() - &y_own;
                LossTerm::none().with_output_linear(&g * (sign * beta), &fwd)
            } else {
                LossTerm::none().with_euclidean(sign * beta, &y_own)
            };
            Ok(vec![term])
        }
        Variant::TargetedRovr | Variant::TargetedArovr | Variant::TargetedArovrG => {
            let alpha = spec.alpha;
            let abar = 1.0 - alpha;
            let adv = match spec.adversarial_loss {
                AdversarialLoss::Target => {
                    let t = aux
                        .adv_target
                        .as_ref()
                        .ok_or_else(|| Error::InvalidSpec("adversarial targets missing".into()))?;
                    check_targets(params, &t.view(), x.nrows())?;
                    LossTerm::none().with_euclidean(abar * beta, t)
                }
                AdversarialLoss::Zero => LossTerm::none(),
                AdversarialLoss::NegatedTrue => LossTerm::none().with_euclidean(-abar * beta, &y_own),
            };
            let adv = match (spec.variant, &aux.g) {
                (Variant::TargetedArovrG, Some(g)) => adv.with_perturbation(g.clone()),
                _ => adv,
            };
            Ok(if spec.variant == Variant::TargetedRovr {
                vec![adv.clone().with_euclidean(alpha * beta, &y_own), adv]
            } else {
                vec![adv.clone(), adv.with_euclidean(-alpha * beta, &y_own)]
            })
        }
    }
}

/// Fraction of rows whose output argmax matches the target argmax.
pub fn batch_accuracy(output: &Array2<f64>, y: &ArrayView2<f64>) -> f64 {
    let pred = argmax_rows(output);
    let truth = argmax_rows(&y.to_owned());
    let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len().max(1) as f64
}
