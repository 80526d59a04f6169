//! Operator norms by power iteration, the Lipschitz product bound and the
//! safe `beta` bound for linear networks.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{random_matrix, NetworkParams};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 20_000;

/// Result of one power iteration on `W^T W`.
#[derive(Clone, Debug)]
pub struct PowerIteration {
    pub sigma: f64,
    /// Unit right singular vector estimate, reusable as a warm start.
    pub vector: Array1<f64>,
    pub iters: usize,
}

fn start_vector(n: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let v = random_matrix(&mut rng, 1, n, 1.0).into_shape_with_order(n).unwrap();
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Largest singular value of `w`. Iterates `v <- W^T W v` until the
/// eigen-residual `|W^T W v - mu v|` falls below `tol * mu`.
pub fn power_iteration(w: &Array2<f64>, warm: Option<&Array1<f64>>, tol: f64, max_iters: usize) -> Result<PowerIteration> {
    let n = w.ncols();
    if w.iter().all(|&x| x == 0.0) {
        return Ok(PowerIteration {
            sigma: 0.0,
            vector: start_vector(n),
            iters: 0,
        });
    }
    let mut v = match warm {
        Some(v0) if v0.len() == n && v0.dot(v0) > 0.0 => v0 / v0.dot(v0).sqrt(),
        _ => start_vector(n),
    };
    for iter in 1..=max_iters {
        let wv = w.dot(&v);
        let av = w.t().dot(&wv);
        let mu = v.dot(&av);
        let res = (&av - &(&v * mu)).dot(&(&av - &(&v * mu))).sqrt();
        let norm = av.dot(&av).sqrt();
        if res <= tol * mu.abs() {
            return Ok(PowerIteration {
                sigma: mu.max(0.0).sqrt(),
                vector: v,
                iters: iter,
            });
        }
        if norm == 0.0 {
            v = start_vector(n);
        } else {
            v = av / norm;
        }
    }
    Err(Error::NoConvergence { iters: max_iters })
}

/// `|W|_2` to relative tolerance `tol`.
pub fn spectral_norm(w: &Array2<f64>, tol: f64, max_iters: usize) -> Result<f64> {
    Ok(power_iteration(w, None, tol, max_iters)?.sigma)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralEstimate {
    /// `|W_j|_2` for `j = 0, ..., L-1`.
    pub norms: Vec<f64>,
    pub product: f64,
    pub iters: Vec<usize>,
    pub tol: f64,
    pub converged: bool,
}

/// Per-layer spectral norms, warm-started from the previous call.
#[derive(Clone, Debug)]
pub struct SpectralTracker {
    pub tol: f64,
    pub max_iters: usize,
    vectors: Vec<Option<Array1<f64>>>,
}

impl Default for SpectralTracker {
    fn default() -> Self {
        Self::new(DEFAULT_TOL, DEFAULT_MAX_ITERS)
    }
}

impl SpectralTracker {
    pub fn new(tol: f64, max_iters: usize) -> Self {
        Self {
            tol,
            max_iters,
            vectors: Vec::new(),
        }
    }

    /// Never fails: a layer that does not converge keeps its last iterate and
    /// clears `converged`.
    pub fn estimate(&mut self, params: &NetworkParams) -> SpectralEstimate {
        self.vectors.resize(params.num_layers(), None);
        let mut est = SpectralEstimate {
            norms: Vec::new(),
            product: 1.0,
            iters: Vec::new(),
            tol: self.tol,
            converged: true,
        };
        for (w, slot) in params.weights.iter().zip(self.vectors.iter_mut()) {
            let (sigma, iters) = match power_iteration(w, slot.as_ref(), self.tol, self.max_iters) {
                Ok(p) => {
                    *slot = Some(p.vector);
                    (p.sigma, p.iters)
                }
                Err(_) => {
                    est.converged = false;
                    // fall back to a loose estimate from a fresh start
                    let p = power_iteration(w, None, 1e-3, usize::MAX >> 1).expect("loose tolerance converges");
                    (p.sigma, p.iters)
                }
            };
            est.norms.push(sigma);
            est.iters.push(iters);
            est.product *= sigma;
        }
        est
    }
}

pub fn spectral_estimate(params: &NetworkParams) -> SpectralEstimate {
    SpectralTracker::default().estimate(params)
}

/// `prod_k |W_k|_2`, a Lipschitz bound for 1-Lipschitz activations.
pub fn lipschitz_estimate(params: &NetworkParams) -> f64 {
    spectral_estimate(params).product
}

/// `1 / (1 + sum_{k=1}^{L-1} prod_{j=k}^{L-1} |W_j^T W_j|_2)`.
pub fn safe_beta(params: &NetworkParams) -> f64 {
    safe_beta_from_norms(&spectral_estimate(params).norms)
}

/// Same bound from precomputed `|W_j|_2`, `j = 0, ..., L-1`.
pub fn safe_beta_from_norms(norms: &[f64]) -> f64 {
    let l = norms.len();
    let mut sum = 0.0;
    let mut prod = 1.0;
    // accumulate the products from the top layer downwards
    for j in (1..l).rev() {
        prod *= norms[j] * norms[j];
        sum += prod;
    }
    1.0 / (1.0 + sum)
}
