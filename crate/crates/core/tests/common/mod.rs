//! Shared oracles for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use lifted_core::network::{random_matrix, Activation, ActivationState, Architecture, NetworkParams};
use lifted_core::potential::{potential_grad_theta, potential_grad_z, potential_value, PotentialSpec};

pub const FD_STEP: f64 = 1e-5;
/// Pre-activations of ReLU instances stay this far from the kink.
pub const KINK_MARGIN: f64 = 0.1;

pub struct FdInstance {
    pub params: NetworkParams,
    pub spec: PotentialSpec,
    pub state: ActivationState,
}

/// Random network and an arbitrary (not inferred) state. ReLU layers get
/// strictly positive activities; pre-activations are resampled until every
/// one is at least `KINK_MARGIN` away from zero.
pub fn random_fd_instance(rng: &mut ChaCha8Rng, hidden: Activation) -> FdInstance {
    loop {
        let l = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(2..=5)];
        for _ in 0..l {
            dims.push(rng.random_range(2..=6));
        }
        let arch = Architecture::mlp(&dims, hidden, Activation::Linear, rng.random_bool(0.5)).unwrap();
        let mut params = NetworkParams::zeros(&arch);
        for w in params.weights.iter_mut() {
            let (r, c) = w.dim();
            *w = random_matrix(rng, r, c, 1.0);
        }
        if let Some(bs) = params.biases.as_mut() {
            for b in bs.iter_mut() {
                let n = b.len();
                *b = random_matrix(rng, 1, n, 0.5).into_shape_with_order(n).unwrap();
            }
        }
        let gamma = (0..l).map(|_| rng.random_range(0.5..2.0)).collect();
        let spec = PotentialSpec::weighted(&arch, gamma).unwrap();
        let batch = rng.random_range(1..=3);
        let input = random_matrix(rng, batch, dims[0], 1.0);
        let layers: Vec<Array2<f64>> = (1..=l)
            .map(|k| {
                let m = random_matrix(rng, batch, dims[k], 1.0);
                if arch.activation(k) == Activation::Relu {
                    m.mapv(|v| 0.85 + 0.65 * v)
                } else {
                    m
                }
            })
            .collect();
        let state = ActivationState { input, layers };
        let clear = (1..=l).all(|k| {
            arch.activation(k) == Activation::Linear
                || params
                    .pre_activation(k, &state.z(k - 1))
                    .iter()
                    .all(|a| a.abs() > KINK_MARGIN)
        });
        if clear {
            return FdInstance { params, spec, state };
        }
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Relative errors of `dU/dtheta` and `dU/dz` against central differences.
pub fn fd_errors(inst: &FdInstance) -> (f64, f64) {
    let u = |p: &NetworkParams, s: &ActivationState| potential_value(p, &inst.spec, s).unwrap();

    let analytic: Vec<f64> = potential_grad_theta(&inst.params, &inst.spec, &inst.state).unwrap().values().collect();
    let n = analytic.len();
    let numeric: Vec<f64> = (0..n)
        .map(|j| {
            let mut plus = inst.params.clone();
            *plus.values_mut().nth(j).unwrap() += FD_STEP;
            let mut minus = inst.params.clone();
            *minus.values_mut().nth(j).unwrap() -= FD_STEP;
            (u(&plus, &inst.state) - u(&minus, &inst.state)) / (2.0 * FD_STEP)
        })
        .collect();
    let theta_err = rel_err(&analytic, &numeric);

    let mut za = Vec::new();
    let mut zn = Vec::new();
    for k in 1..=inst.params.num_layers() {
        let g = potential_grad_z(&inst.params, &inst.spec, &inst.state, k).unwrap();
        for (idx, &a) in g.indexed_iter() {
            let mut plus = inst.state.clone();
            plus.layers[k - 1][idx] += FD_STEP;
            let mut minus = inst.state.clone();
            minus.layers[k - 1][idx] -= FD_STEP;
            za.push(a);
            zn.push((u(&inst.params, &plus) - u(&inst.params, &minus)) / (2.0 * FD_STEP));
        }
    }
    (theta_err, rel_err(&za, &zn))
}

/// MNIST directory from `LIFTED_DATA_DIR` or the workspace `data/mnist`.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("LIFTED_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.is_dir().then_some(dir)
}
