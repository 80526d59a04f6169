//! Fenchel-Young divergences and the layered network potential
//!
//! ```text
//! U(z; x) = sum_k gamma_k * D_k(z_k || W_{k-1} z_{k-1} + b_{k-1})
//! D_k(z || a) = G_k(z) - z^T a + G_k^*(a)
//! ```
//!
//! with `G(z) = |z|^2 / 2 (+ indicator(z >= 0))`. With all `gamma_k = 1` this is
//! the plain potential; other weights give the reweighted potential, which has
//! the same minimizer (the forward pass) but rescales back-propagated errors.

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activation, ActivationState, Architecture, NetworkParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// `G(z) = |z|^2/2` on `R`; conjugate `|a|^2/2`; activation identity.
    LinearG,
    /// `G(z) = |z|^2/2 + indicator(z >= 0)`; conjugate `|max(a,0)|^2/2`; activation ReLU.
    ReluG,
}

impl GeneratorKind {
    pub fn for_activation(act: Activation) -> Self {
        match act {
            Activation::Linear => GeneratorKind::LinearG,
            Activation::Relu => GeneratorKind::ReluG,
        }
    }

    pub fn activation(self) -> Activation {
        match self {
            GeneratorKind::LinearG => Activation::Linear,
            GeneratorKind::ReluG => Activation::Relu,
        }
    }

    /// `G(z)` for one coordinate (possibly `+inf`).
    pub fn generator(self, z: f64) -> f64 {
        match self {
            GeneratorKind::ReluG if z < 0.0 => f64::INFINITY,
            _ => 0.5 * z * z,
        }
    }

    /// `G^*(a)` for one coordinate.
    pub fn conjugate(self, a: f64) -> f64 {
        match self {
            GeneratorKind::LinearG => 0.5 * a * a,
            GeneratorKind::ReluG => {
                let p = a.max(0.0);
                0.5 * p * p
            }
        }
    }

    /// Coordinate-wise divergence `G(z) - z a + G^*(a)`.
    ///
    /// Evaluated in the rearranged form `(z - f(a))^2/2 + z * max(-a, 0)` for
    /// ReLU, which is exactly zero on `z = f(a)` and never negative through
    /// cancellation.
    #[inline]
    pub fn divergence(self, z: f64, a: f64) -> f64 {
        match self {
            GeneratorKind::LinearG => {
                let r = z - a;
                0.5 * r * r
            }
            GeneratorKind::ReluG => {
                if z < 0.0 {
                    f64::INFINITY
                } else {
                    let r = z - a.max(0.0);
                    0.5 * r * r + z * (-a).max(0.0)
                }
            }
        }
    }

    pub fn in_domain(self, z: f64) -> bool {
        match self {
            GeneratorKind::LinearG => true,
            GeneratorKind::ReluG => z >= 0.0,
        }
    }
}

/// Per-layer generators and weights `gamma_1, ..., gamma_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    generators: Vec<GeneratorKind>,
    gamma: Vec<f64>,
}

impl PotentialSpec {
    /// Unweighted potential matching the architecture's activations.
    pub fn for_arch(arch: &Architecture) -> Self {
        Self {
            generators: arch.activations().iter().map(|&a| GeneratorKind::for_activation(a)).collect(),
            gamma: vec![1.0; arch.num_layers()],
        }
    }

    pub fn weighted(arch: &Architecture, gamma: Vec<f64>) -> Result<Self> {
        let spec = Self {
            generators: Self::for_arch(arch).generators,
            gamma,
        };
        spec.validate(arch)?;
        Ok(spec)
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        let l = arch.num_layers();
        if self.gamma.len() != l {
            return Err(Error::DimensionMismatch {
                context: "gamma per layer",
                expected: l,
                actual: self.gamma.len(),
            });
        }
        if self.generators.len() != l {
            return Err(Error::DimensionMismatch {
                context: "generators per layer",
                expected: l,
                actual: self.generators.len(),
            });
        }
        if let Some(g) = self.gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidSpec(format!("gamma must be positive and finite, got {g}")));
        }
        for (k, (g, a)) in self.generators.iter().zip(arch.activations()).enumerate() {
            if g.activation() != *a {
                return Err(Error::InvalidSpec(format!(
                    "generator {g:?} of layer {} does not match activation {a:?}",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// `gamma_k` for `k` in `1..=L`.
    pub fn gamma_of(&self, k: usize) -> f64 {
        self.gamma[k - 1]
    }

    pub fn generator(&self, k: usize) -> GeneratorKind {
        self.generators[k - 1]
    }

    pub fn generators(&self) -> &[GeneratorKind] {
        &self.generators
    }

    pub fn is_linear(&self) -> bool {
        self.generators.iter().all(|g| *g == GeneratorKind::LinearG)
    }
}

/// `D(z || a) = G(z) - z^T a + G^*(a)`; `+inf` when `z` leaves the domain of `G`.
pub fn fy_divergence(kind: GeneratorKind, z: &Array1<f64>, a: &Array1<f64>) -> Result<f64> {
    if z.len() != a.len() {
        return Err(Error::DimensionMismatch {
            context: "divergence arguments",
            expected: z.len(),
            actual: a.len(),
        });
    }
    Ok(z.iter().zip(a).map(|(&zi, &ai)| kind.divergence(zi, ai)).sum())
}

fn check_state(params: &NetworkParams, spec: &PotentialSpec, state: &ActivationState) -> Result<()> {
    let arch = params.arch();
    spec.validate(arch)?;
    if state.num_layers() != arch.num_layers() {
        return Err(Error::DimensionMismatch {
            context: "state layers",
            expected: arch.num_layers(),
            actual: state.num_layers(),
        });
    }
    let b = state.batch_size();
    for (k, &d) in arch.layer_dims().iter().enumerate() {
        let z = state.z(k);
        if z.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "state layer width",
                expected: d,
                actual: z.ncols(),
            });
        }
        if z.nrows() != b {
            return Err(Error::DimensionMismatch {
                context: "state batch size",
                expected: b,
                actual: z.nrows(),
            });
        }
    }
    Ok(())
}

/// `sum_rows D_k(z_k || a_k)` for a single layer, without the `gamma_k` factor.
pub fn layer_divergence(params: &NetworkParams, spec: &PotentialSpec, state: &ActivationState, k: usize) -> f64 {
    let a = params.pre_activation(k, &state.z(k - 1));
    let kind = spec.generator(k);
    let mut total = 0.0;
    Zip::from(&state.layers[k - 1]).and(&a).for_each(|&z, &a| total += kind.divergence(z, a));
    total
}

/// Batch-summed (reweighted) network potential. Zero exactly on forward states.
pub fn potential_value(params: &NetworkParams, spec: &PotentialSpec, state: &ActivationState) -> Result<f64> {
    check_state(params, spec, state)?;
    Ok((1..=params.num_layers())
        .map(|k| spec.gamma_of(k) * layer_divergence(params, spec, state, k))
        .sum())
}

/// `dU/dz_k` in the interior sense (the ReLU domain is handled by projection
/// in the inference loop):
///
/// `gamma_k (z_k - a_k) + gamma_{k+1} (f_{k+1}(a_{k+1}) - z_{k+1}) W_k`.
///
/// ReLU coordinates sitting at zero get the minimal-norm element of the
/// subdifferential, so the gradient vanishes exactly at the forward pass.
pub fn potential_grad_z(
    params: &NetworkParams,
    spec: &PotentialSpec,
    state: &ActivationState,
    k: usize,
) -> Result<Array2<f64>> {
    check_state(params, spec, state)?;
    let l = params.num_layers();
    if k == 0 || k > l {
        return Err(Error::InvalidSpec(format!("layer index {k} outside 1..={l}")));
    }
    let a = params.pre_activation(k, &state.z(k - 1));
    let mut grad = (&state.layers[k - 1] - &a) * spec.gamma_of(k);
    if k < l {
        let mut a_next = params.pre_activation(k + 1, &state.z(k));
        params.arch().activation(k + 1).apply_inplace(&mut a_next);
        let err = a_next - &state.layers[k];
        grad.scaled_add(spec.gamma_of(k + 1), &err.dot(params.weight_into(k + 1)));
    }
    if spec.generator(k) == GeneratorKind::ReluG {
        // on the boundary z_i = 0 report the minimal-norm subgradient
        Zip::from(&mut grad).and(&state.layers[k - 1]).for_each(|g, &z| {
            if z == 0.0 {
                *g = g.min(0.0);
            }
        });
    }
    Ok(grad)
}

/// Batch-summed `dU/dtheta`: `gamma_k (f_k(a_k) - z_k)^T z_{k-1}` per weight,
/// column sums of `gamma_k (f_k(a_k) - z_k)` per bias.
pub fn potential_grad_theta(
    params: &NetworkParams,
    spec: &PotentialSpec,
    state: &ActivationState,
) -> Result<NetworkParams> {
    check_state(params, spec, state)?;
    let mut grad = params.zeros_like();
    for k in 1..=params.num_layers() {
        let mut err = params.pre_activation(k, &state.z(k - 1));
        params.arch().activation(k).apply_inplace(&mut err);
        err -= &state.layers[k - 1];
        err *= spec.gamma_of(k);
        grad.weights[k - 1] = err.t().dot(&state.z(k - 1));
        if let Some(bs) = grad.biases.as_mut() {
            bs[k - 1] = err.sum_axis(Axis(0));
        }
    }
    Ok(grad)
}
