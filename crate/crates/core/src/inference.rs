//! Inference of lifted activities: `min_z U(z; x) + h(z)`.
//!
//! The solver starts from the forward pass and runs backward sweeps that
//! update `z_L, z_{L-1}, ..., z_1` in turn. The output layer is solved in
//! closed form (its subproblem is a separable quadratic for Euclidean losses);
//! interior layers apply the fixed-point map of the reweighted dynamics
//!
//! ```text
//! z_k <- f_k( a_k + (gamma_{k+1}/gamma_k) (z_{k+1} - f_{k+1}(a_{k+1})) W_k - g_k/gamma_k )
//! ```
//!
//! which keeps ReLU layers feasible at every step.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::LinearModel;
use crate::network::{forward, Activation, ActivationState, NetworkParams};
use crate::potential::{potential_value, PotentialSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Backward sweeps after the initial forward pass.
    pub sweeps: usize,
    /// Fixed-point applications per interior block and sweep.
    pub inner_iters: usize,
    pub record_trajectory: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            sweeps: 20,
            inner_iters: 1,
            record_trajectory: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidSpec("sweeps and inner_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss term `h(z)` added to the potential during inference:
///
/// `h(z) = sum_i c_i |z_L - t_i|^2 / 2 + sum_k g_k^T z_k`.
///
/// Coefficients may be negative (adversarial phases) as long as the output
/// layer stays strongly convex.
#[derive(Clone, Debug, Default)]
pub struct LossTerm {
    quadratic: Vec<(f64, Array2<f64>)>,
    perturbation: Option<Vec<Array2<f64>>>,
}

impl LossTerm {
    pub fn none() -> Self {
        Self::default()
    }

    /// `beta * l(z; y)`.
    pub fn plus_target(beta: f64, target: &Array2<f64>) -> Self {
        Self::none().with_euclidean(beta, target)
    }

    /// `-beta * l(z; y)`.
    pub fn minus_target(beta: f64, target: &Array2<f64>) -> Self {
        Self::none().with_euclidean(-beta, target)
    }

    /// `beta * ((1 - alpha) l(z; y_adv) + alpha l(z; y))`, i.e. label smoothing.
    pub fn mixed(alpha: f64, beta: f64, target: &Array2<f64>, adv_target: &Array2<f64>) -> Self {
        Self::none()
            .with_euclidean((1.0 - alpha) * beta, adv_target)
            .with_euclidean(alpha * beta, target)
    }

    /// `beta * ((1 - alpha) l(z; y_adv) - alpha l(z; y))`, the targeted attack.
    pub fn adv_mixed(alpha: f64, beta: f64, target: &Array2<f64>, adv_target: &Array2<f64>) -> Self {
        Self::none()
            .with_euclidean((1.0 - alpha) * beta, adv_target)
            .with_euclidean(-alpha * beta, target)
    }

    /// Adds `coef * |z_L - target|^2 / 2`.
    pub fn with_euclidean(mut self, coef: f64, target: &Array2<f64>) -> Self {
        if coef != 0.0 {
            self.quadratic.push((coef, target.clone()));
        }
        self
    }

    /// Adds `sum_k g_k^T z_k`; `g` holds one `batch x d_k` matrix per layer.
    pub fn with_perturbation(mut self, g: Vec<Array2<f64>>) -> Self {
        match self.perturbation.as_mut() {
            Some(existing) => {
                for (e, gk) in existing.iter_mut().zip(g) {
                    *e += &gk;
                }
            }
            None => self.perturbation = Some(g),
        }
        self
    }

    /// Adds a linear term on the output layer only.
    pub fn with_output_linear(self, g_out: Array2<f64>, state_like: &ActivationState) -> Self {
        let l = state_like.num_layers();
        let mut g: Vec<Array2<f64>> = state_like.layers.iter().map(|z| Array2::zeros(z.raw_dim())).collect();
        g[l - 1] = g_out;
        self.with_perturbation(g)
    }

    pub fn is_none(&self) -> bool {
        self.quadratic.is_empty() && self.perturbation.is_none()
    }

    /// Curvature the loss adds to the output layer, `sum_i c_i`.
    pub fn curvature(&self) -> f64 {
        self.quadratic.iter().map(|(c, _)| c).sum()
    }

    pub fn quadratic_terms(&self) -> &[(f64, Array2<f64>)] {
        &self.quadratic
    }

    pub fn perturbation(&self) -> Option<&[Array2<f64>]> {
        self.perturbation.as_deref()
    }

    /// Batch-summed `h(z)`.
    pub fn value(&self, state: &ActivationState) -> f64 {
        let out = state.output();
        let mut total = 0.0;
        for (c, t) in &self.quadratic {
            total += c * 0.5 * sq_dist(out, t);
        }
        if let Some(g) = &self.perturbation {
            for (gk, zk) in g.iter().zip(&state.layers) {
                total += (gk * zk).sum();
            }
        }
        total
    }

    fn perturbation_of(&self, k: usize) -> Option<&Array2<f64>> {
        self.perturbation.as_ref().map(|g| &g[k - 1])
    }

    fn check(&self, params: &NetworkParams, batch: usize) -> Result<()> {
        let dims = params.arch().layer_dims();
        for (_, t) in &self.quadratic {
            if t.dim() != (batch, params.arch().output_dim()) {
                return Err(Error::DimensionMismatch {
                    context: "loss target shape",
                    expected: batch * params.arch().output_dim(),
                    actual: t.len(),
                });
            }
        }
        if let Some(g) = &self.perturbation {
            if g.len() != params.num_layers() {
                return Err(Error::DimensionMismatch {
                    context: "perturbation layers",
                    expected: params.num_layers(),
                    actual: g.len(),
                });
            }
            for (k, gk) in g.iter().enumerate() {
                if gk.dim() != (batch, dims[k + 1]) {
                    return Err(Error::DimensionMismatch {
                        context: "perturbation shape",
                        expected: batch * dims[k + 1],
                        actual: gk.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    Zip::from(a).and(b).for_each(|&x, &y| s += (x - y) * (x - y));
    s
}

/// Closed-form minimizer of `gamma |z - a|^2/2 + h(z)` over the output layer's
/// domain. Written as `a + (sum_i c_i (t_i - a) - g) / (gamma + sum_i c_i)` so
/// that an empty loss returns `f(a)` bit for bit.
fn output_update(a: &Array2<f64>, gamma: f64, act: Activation, loss: &LossTerm, l: usize) -> Result<Array2<f64>> {
    let curvature = gamma + loss.curvature();
    if !(curvature > 0.0) {
        return Err(Error::NonPositiveCurvature { curvature });
    }
    let mut z = a.clone();
    if !loss.is_none() {
        let mut shift = Array2::<f64>::zeros(a.raw_dim());
        for (c, t) in &loss.quadratic {
            Zip::from(&mut shift).and(t).and(a).for_each(|s, &t, &a| *s += c * (t - a));
        }
        if let Some(g) = loss.perturbation_of(l) {
            shift -= g;
        }
        z.scaled_add(1.0 / curvature, &shift);
    }
    act.apply_inplace(&mut z);
    Ok(z)
}

/// Fixed-point map for interior layer `k`; `a_next` must be the pre-activation
/// of layer `k + 1` computed from the current `z_k`.
fn interior_update(
    params: &NetworkParams,
    spec: &PotentialSpec,
    loss: &LossTerm,
    k: usize,
    a_k: &Array2<f64>,
    a_next: &Array2<f64>,
    z_next: &ArrayView2<f64>,
) -> Array2<f64> {
    let next_act = params.arch().activation(k + 1);
    let mut err = z_next.to_owned();
    Zip::from(&mut err).and(a_next).for_each(|e, &a| *e -= next_act.eval(a));
    let back = err.dot(params.weight_into(k + 1));
    let ratio = spec.gamma_of(k + 1) / spec.gamma_of(k);
    let mut z = a_k.clone();
    z.scaled_add(ratio, &back);
    if let Some(g) = loss.perturbation_of(k) {
        z.scaled_add(-1.0 / spec.gamma_of(k), g);
    }
    params.arch().activation(k).apply_inplace(&mut z);
    z
}

/// New value of block `k` given the rest of `state`, without mutating it.
pub fn block_update(
    params: &NetworkParams,
    spec: &PotentialSpec,
    state: &ActivationState,
    k: usize,
    loss: &LossTerm,
) -> Result<Array2<f64>> {
    let l = params.num_layers();
    if k == 0 || k > l {
        return Err(Error::InvalidSpec(format!("layer index {k} outside 1..={l}")));
    }
    loss.check(params, state.batch_size())?;
    let a_k = params.pre_activation(k, &state.z(k - 1));
    if k == l {
        output_update(&a_k, spec.gamma_of(l), params.arch().activation(l), loss, l)
    } else {
        let a_next = params.pre_activation(k + 1, &state.z(k));
        Ok(interior_update(params, spec, loss, k, &a_k, &a_next, &state.z(k + 1)))
    }
}

/// `max_k |z_k - block_update(k)|_inf` at a fixed state.
pub fn residual(params: &NetworkParams, spec: &PotentialSpec, state: &ActivationState, loss: &LossTerm) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 1..=params.num_layers() {
        let z = block_update(params, spec, state, k, loss)?;
        Zip::from(&z)
            .and(&state.layers[k - 1])
            .for_each(|&a, &b| worst = worst.max((a - b).abs()));
    }
    Ok(worst)
}

/// `U(z) + h(z)`, the quantity the solver minimizes.
pub fn inference_objective(
    params: &NetworkParams,
    spec: &PotentialSpec,
    state: &ActivationState,
    loss: &LossTerm,
) -> Result<f64> {
    Ok(potential_value(params, spec, state)? + loss.value(state))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    /// 0 is the forward initialization.
    pub sweep: usize,
    pub objective: f64,
    pub residual: f64,
}

/// Partial trajectory together with the outcome; a diverged run still
/// returns the records up to the failing sweep.
#[derive(Debug)]
pub struct TracedInference {
    pub records: Vec<SweepRecord>,
    pub result: Result<ActivationState>,
}

impl TracedInference {
    /// Writes `sweep,objective,residual` rows; divergence ends with a
    /// `diverged,NaN,NaN` marker row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "sweep,objective,residual")?;
        for r in &self.records {
            writeln!(out, "{},{},{}", r.sweep, r.objective, r.residual)?;
        }
        if self.result.is_err() {
            writeln!(out, "diverged,NaN,NaN")?;
        }
        Ok(())
    }
}

pub fn infer(
    params: &NetworkParams,
    spec: &PotentialSpec,
    cfg: &InferenceConfig,
    x: &ArrayView2<f64>,
    loss: &LossTerm,
) -> Result<ActivationState> {
    run_bcd(params, spec, cfg, x, loss, None)
}

/// Like [`infer`], recording objective and residual after every sweep.
pub fn infer_traced(
    params: &NetworkParams,
    spec: &PotentialSpec,
    cfg: &InferenceConfig,
    x: &ArrayView2<f64>,
    loss: &LossTerm,
) -> TracedInference {
    let mut records = Vec::new();
    let result = run_bcd(params, spec, cfg, x, loss, Some(&mut records));
    TracedInference { records, result }
}

fn record(
    params: &NetworkParams,
    spec: &PotentialSpec,
    state: &ActivationState,
    loss: &LossTerm,
    sweep: usize,
    out: &mut Vec<SweepRecord>,
) -> Result<()> {
    out.push(SweepRecord {
        sweep,
        objective: inference_objective(params, spec, state, loss)?,
        residual: residual(params, spec, state, loss)?,
    });
    Ok(())
}

fn run_bcd(
    params: &NetworkParams,
    spec: &PotentialSpec,
    cfg: &InferenceConfig,
    x: &ArrayView2<f64>,
    loss: &LossTerm,
    mut trace: Option<&mut Vec<SweepRecord>>,
) -> Result<ActivationState> {
    cfg.validate()?;
    spec.validate(params.arch())?;
    let mut state = forward(params, x)?;
    loss.check(params, state.batch_size())?;
    let l = params.num_layers();
    let top_curvature = spec.gamma_of(l) + loss.curvature();
    if !(top_curvature > 0.0) {
        return Err(Error::NonPositiveCurvature {
            curvature: top_curvature,
        });
    }
    if let Some(t) = trace.as_deref_mut() {
        record(params, spec, &state, loss, 0, t)?;
    }
    if loss.is_none() {
        // the forward pass is the global minimizer and every block update is a no-op
        if let Some(t) = trace.as_deref_mut() {
            for sweep in 1..=cfg.sweeps {
                let mut r = t[0];
                r.sweep = sweep;
                t.push(r);
            }
        }
        return Ok(state);
    }

    let a_first = params.pre_activation(1, &state.z(0));
    for sweep in 1..=cfg.sweeps {
        let mut a_cur = if l == 1 {
            a_first.clone()
        } else {
            params.pre_activation(l, &state.z(l - 1))
        };
        state.layers[l - 1] = output_update(&a_cur, spec.gamma_of(l), params.arch().activation(l), loss, l)?;
        for k in (1..l).rev() {
            let mut a_next = a_cur;
            let a_k = if k == 1 {
                a_first.clone()
            } else {
                params.pre_activation(k, &state.z(k - 1))
            };
            for it in 0..cfg.inner_iters {
                if it > 0 {
                    a_next = params.pre_activation(k + 1, &state.z(k));
                }
                let z_new = interior_update(params, spec, loss, k, &a_k, &a_next, &state.z(k + 1));
                state.layers[k - 1] = z_new;
            }
            a_cur = a_k;
        }
        if !state.is_finite() {
            return Err(Error::Diverged { sweep });
        }
        if let Some(t) = trace.as_deref_mut() {
            record(params, spec, &state, loss, sweep, t)?;
        }
    }
    Ok(state)
}

/// How inference subproblems are solved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Solver {
    /// Forward pass plus backward block-coordinate sweeps.
    Bcd(InferenceConfig),
    /// Dense joint solve; linear generators only.
    Exact,
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Bcd(InferenceConfig::default())
    }
}

impl Solver {
    pub fn solve(
        &self,
        params: &NetworkParams,
        spec: &PotentialSpec,
        x: &ArrayView2<f64>,
        loss: &LossTerm,
    ) -> Result<ActivationState> {
        match self {
            Solver::Bcd(cfg) => infer(params, spec, cfg, x, loss),
            Solver::Exact => solve_exact(params, spec, x, loss),
        }
    }
}

/// Joint minimizer of `U + h` for linear networks, one dense solve per sample.
pub fn solve_exact(
    params: &NetworkParams,
    spec: &PotentialSpec,
    x: &ArrayView2<f64>,
    loss: &LossTerm,
) -> Result<ActivationState> {
    let model = LinearModel::new(params, spec)?;
    let batch = x.nrows();
    if x.ncols() != params.arch().input_dim() {
        return Err(Error::DimensionMismatch {
            context: "input columns",
            expected: params.arch().input_dim(),
            actual: x.ncols(),
        });
    }
    loss.check(params, batch)?;
    let mut rows = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut q = model.potential(x.row(i));
        for (c, t) in loss.quadratic_terms() {
            q = q.plus(*c, &model.output_loss(t.row(i)));
        }
        if let Some(g) = loss.perturbation() {
            let gi: Vec<_> = g.iter().map(|gk| gk.row(i)).collect();
            q = q.plus(1.0, &model.linear(&gi));
        }
        let (v, _) = q.minimize()?;
        rows.push(model.unpack(&v));
    }
    Ok(model.assemble(x.to_owned(), &rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, random_matrix, Architecture, InitScheme};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn relu_net(seed: u64, dims: &[usize]) -> NetworkParams {
        let arch = Architecture::mlp(dims, Activation::Relu, Activation::Linear, false).unwrap();
        init_params(&arch, seed, InitScheme::KaimingUniform)
    }

    #[test]
    fn no_loss_returns_forward_exactly() {
        let p = relu_net(1, &[5, 6, 4, 3]);
        let spec = PotentialSpec::weighted(p.arch(), vec![0.3, 1.7, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 4, 5, 1.0);
        let s = infer(&p, &spec, &InferenceConfig::default(), &x.view(), &LossTerm::none()).unwrap();
        assert_eq!(s, forward(&p, &x.view()).unwrap());
        assert_eq!(residual(&p, &spec, &s, &LossTerm::none()).unwrap(), 0.0);
    }

    #[test]
    fn single_linear_layer_minus_target() {
        let arch = Architecture::mlp(&[1, 1], Activation::Linear, Activation::Linear, false).unwrap();
        let p = NetworkParams::from_parts(arch.clone(), vec![array![[0.0]]], None).unwrap();
        let spec = PotentialSpec::for_arch(&arch);
        let y = array![[1.0]];
        let s = infer(
            &p,
            &spec,
            &InferenceConfig::default(),
            &array![[0.7]].view(),
            &LossTerm::minus_target(0.25, &y),
        )
        .unwrap();
        assert!((s.layers[0][(0, 0)] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn label_smoothing_output_form() {
        // Mixed loss with gamma_L = 1: z_L = (a + beta (abar y_adv + alpha y)) / (1 + beta)
        let a = array![[0.2, -0.4, 1.0]];
        let y = array![[1.0, 0.0, 0.0]];
        let y_adv = array![[0.0, 0.0, 1.0]];
        let (alpha, beta) = (0.49, 0.25);
        let z = output_update(&a, 1.0, Activation::Linear, &LossTerm::mixed(alpha, beta, &y, &y_adv), 1).unwrap();
        let expected = (&a + &((&y_adv * (1.0 - alpha) + &y * alpha) * beta)) / (1.0 + beta);
        assert!((&z - &expected).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn half_alpha_adv_mixed_is_linear_shift() {
        let gamma = 1.7;
        let beta = 0.6;
        let a = array![[0.2, -0.4, 1.0]];
        let y = array![[1.0, 0.0, 0.0]];
        let y_adv = array![[0.0, 1.0, 0.0]];
        let z = output_update(&a, gamma, Activation::Linear, &LossTerm::adv_mixed(0.5, beta, &y, &y_adv), 1).unwrap();
        // stationarity: gamma (z - a) + beta/2 (y - y_adv) = 0
        let expected = &a + &((&y_adv - &y) * (beta / (2.0 * gamma)));
        assert!((&z - &expected).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn output_update_is_block_minimizer() {
        // 1-D oracle per coordinate: bisection on the derivative of the
        // separable block objective over the layer's domain
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let gamma: f64 = rng.random_range(0.5..2.0);
            let alpha: f64 = rng.random_range(0.05..0.45);
            let beta: f64 = rng.random_range(0.05..1.5);
            let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Linear };
            let a = random_matrix(&mut rng, 1, 4, 2.0);
            let y = random_matrix(&mut rng, 1, 4, 1.0);
            let y_adv = random_matrix(&mut rng, 1, 4, 1.0);
            let g = random_matrix(&mut rng, 1, 4, 0.5);
            let loss = LossTerm::adv_mixed(alpha, beta, &y, &y_adv).with_perturbation(vec![g.clone()]);
            let z = output_update(&a, gamma, act, &loss, 1).unwrap();
            for j in 0..4 {
                let df = |v: f64| {
                    gamma * (v - a[(0, j)]) + (1.0 - alpha) * beta * (v - y_adv[(0, j)])
                        - alpha * beta * (v - y[(0, j)])
                        + g[(0, j)]
                };
                let lo = if act == Activation::Relu { 0.0 } else { -50.0 };
                let best = if df(lo) >= 0.0 { lo } else { bisect_root(df, lo, 50.0) };
                assert!((best - z[(0, j)]).abs() < 1e-8, "{best} vs {}", z[(0, j)]);
            }
        }
    }

    fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn nonpositive_curvature_is_reported() {
        let p = relu_net(2, &[3, 4, 2]);
        let spec = PotentialSpec::for_arch(p.arch());
        let x = Array2::ones((2, 3));
        let y = Array2::ones((2, 2));
        let err = infer(&p, &spec, &InferenceConfig::default(), &x.view(), &LossTerm::minus_target(1.0, &y));
        assert!(matches!(err, Err(Error::NonPositiveCurvature { .. })));
    }

    #[test]
    fn plus_target_decreases_objective() {
        let p = relu_net(3, &[4, 8, 3]);
        let spec = PotentialSpec::for_arch(p.arch());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 6, 4, 1.0);
        let y = random_matrix(&mut rng, 6, 3, 1.0);
        let loss = LossTerm::plus_target(0.1, &y);
        let cfg = InferenceConfig {
            record_trajectory: true,
            ..Default::default()
        };
        let traced = infer_traced(&p, &spec, &cfg, &x.view(), &loss);
        let first = traced.records.first().unwrap().objective;
        let last = traced.records.last().unwrap().objective;
        assert!(last <= first);
        assert_eq!(traced.records.len(), cfg.sweeps + 1);
        let s = traced.result.unwrap();
        assert!(s.layers[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn bcd_matches_exact_solve_on_linear_nets() {
        let arch = Architecture::mlp(&[4, 5, 3], Activation::Linear, Activation::Linear, false).unwrap();
        let p = init_params(&arch, 5, InitScheme::Gaussian { sigma: 0.3 });
        let spec = PotentialSpec::weighted(&arch, vec![0.8, 1.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 3, 4, 1.0);
        let y = random_matrix(&mut rng, 3, 3, 1.0);
        let loss = LossTerm::plus_target(0.5, &y);
        let cfg = InferenceConfig {
            sweeps: 200,
            ..Default::default()
        };
        let bcd = infer(&p, &spec, &cfg, &x.view(), &loss).unwrap();
        let exact = solve_exact(&p, &spec, &x.view(), &loss).unwrap();
        assert!(bcd.max_abs_diff(&exact) < 1e-10);
    }

    #[test]
    fn trace_csv_marks_divergence() {
        let t = TracedInference {
            records: vec![SweepRecord {
                sweep: 0,
                objective: 1.0,
                residual: 0.5,
            }],
            result: Err(Error::Diverged { sweep: 1 }),
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "sweep,objective,residual\n0,1,0.5\ndiverged,NaN,NaN\n");
    }
}
