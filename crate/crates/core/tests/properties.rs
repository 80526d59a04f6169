use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lifted_core::data::{make_split, split_indices, synthetic_pool};
use lifted_core::diagnostics::propositions::random_instance;
use lifted_core::diagnostics::safe_beta;
use lifted_core::exact::LinearModel;
use lifted_core::inference::{infer, solve_exact, InferenceConfig, LossTerm, Solver};
use lifted_core::network::{forward, init_params, random_matrix, Activation, ActivationState, Architecture, InitScheme};
use lifted_core::objectives::{evaluate_with, Auxiliary, ObjectiveSpec, Variant};
use lifted_core::potential::{fy_divergence, potential_value, GeneratorKind, PotentialSpec};

fn relu_net(seed: u64) -> (lifted_core::network::NetworkParams, Array2<f64>) {
    let arch = Architecture::mlp(&[6, 8, 7, 3], Activation::Relu, Activation::Linear, true).unwrap();
    let p = init_params(&arch, seed, InitScheme::UniformFanIn);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    (p, random_matrix(&mut rng, 5, 6, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_deterministic_and_disjoint(pool in 10usize..400, frac_t in 0.0f64..0.6, frac_v in 0.0f64..0.4, seed in any::<u64>()) {
        let n_train = ((pool as f64) * frac_t) as usize;
        let n_val = ((pool as f64) * frac_v) as usize;
        let (t1, v1) = split_indices(pool, n_train, n_val, seed).unwrap();
        let (t2, v2) = split_indices(pool, n_train, n_val, seed).unwrap();
        prop_assert_eq!(&t1, &t2);
        prop_assert_eq!(&v1, &v2);
        prop_assert_eq!(t1.len(), n_train);
        prop_assert_eq!(v1.len(), n_val);
        let mut all: Vec<usize> = t1.iter().chain(&v1).copied().collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n_train + n_val);
        prop_assert!(all.iter().all(|&i| i < pool));
    }

    #[test]
    fn forward_commutes_with_row_permutation(seed in any::<u64>()) {
        let (p, x) = relu_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..x.nrows()).collect();
        perm.sort_by_key(|_| rng.random::<u32>());
        let out = forward(&p, &x.view()).unwrap();
        let out_perm = forward(&p, &x.select(Axis(0), &perm).view()).unwrap();
        prop_assert_eq!(out.output().select(Axis(0), &perm), out_perm.output().clone());
    }

    #[test]
    fn forward_state_has_zero_potential(seed in any::<u64>()) {
        let (p, x) = relu_net(seed);
        let state = forward(&p, &x.view()).unwrap();
        for k in 1..p.num_layers() {
            prop_assert!(state.layers[k - 1].iter().all(|&v| v >= 0.0));
        }
        let gamma = vec![0.5, 1.5, 2.0];
        let spec = PotentialSpec::weighted(p.arch(), gamma).unwrap();
        prop_assert!(potential_value(&p, &spec, &state).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn feasible_perturbation_makes_potential_positive(seed in any::<u64>(), layer in 1usize..=3, delta in 1e-3f64..1.0) {
        let (p, x) = relu_net(seed);
        let spec = PotentialSpec::for_arch(p.arch());
        let mut state = forward(&p, &x.view()).unwrap();
        // upward moves stay inside the ReLU domain
        state.layers[layer - 1][(0, 0)] += delta;
        prop_assert!(potential_value(&p, &spec, &state).unwrap() > 0.0);
    }

    #[test]
    fn divergence_is_nonnegative(zs in prop::collection::vec(0.0f64..5.0, 1..20), a_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(a_seed);
        let z = Array1::from(zs);
        let a = Array1::from_shape_fn(z.len(), |_| rng.random_range(-5.0..5.0));
        for kind in [GeneratorKind::LinearG, GeneratorKind::ReluG] {
            prop_assert!(fy_divergence(kind, &z, &a).unwrap() >= 0.0);
        }
        let zl = z.mapv(|v| v - 2.5);
        prop_assert!(fy_divergence(GeneratorKind::LinearG, &zl, &a).unwrap() >= 0.0);
        prop_assert_eq!(fy_divergence(GeneratorKind::ReluG, &zl.mapv(|v| v.min(-1e-9)), &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn unit_weights_equal_plain_potential(seed in any::<u64>()) {
        let (p, x) = relu_net(seed);
        let mut state = forward(&p, &x.view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for z in state.layers.iter_mut() {
            z.mapv_inplace(|v| (v + rng.random_range(0.0..0.3)).max(0.0));
        }
        let plain = PotentialSpec::for_arch(p.arch());
        let ones = PotentialSpec::weighted(p.arch(), vec![1.0; 3]).unwrap();
        prop_assert_eq!(
            potential_value(&p, &plain, &state).unwrap().to_bits(),
            potential_value(&p, &ones, &state).unwrap().to_bits()
        );
    }

    #[test]
    fn inference_without_loss_is_forward(seed in any::<u64>()) {
        let (p, x) = relu_net(seed);
        let spec = PotentialSpec::for_arch(p.arch());
        let z = infer(&p, &spec, &InferenceConfig::default(), &x.view(), &LossTerm::none()).unwrap();
        prop_assert_eq!(z, forward(&p, &x.view()).unwrap());
    }

    #[test]
    fn safe_beta_shrinks_when_weights_grow(seed in any::<u64>(), factor in 1.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, Activation::Linear, false, 1);
        let mut bigger = inst.params.clone();
        bigger.scale(factor);
        prop_assert!(safe_beta(&bigger) <= safe_beta(&inst.params) * (1.0 + 1e-9));
    }
}

/// Block-coordinate inference on linear nets below the safe bound agrees
/// with the dense joint solve, for unit and non-unit layer weights.
#[test]
fn bcd_matches_joint_solve_below_safe_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for _ in 0..40 {
        let inst = random_instance(&mut rng, Activation::Linear, true, 3);
        let beta = 0.5 * safe_beta(&inst.params) * inst.spec.gamma().iter().cloned().fold(f64::INFINITY, f64::min);
        for loss in [
            LossTerm::minus_target(beta, &inst.y),
            LossTerm::plus_target(beta, &inst.y),
        ] {
            let exact = solve_exact(&inst.params, &inst.spec, &inst.x.view(), &loss).unwrap();
            let cfg = InferenceConfig {
                sweeps: 2000,
                ..InferenceConfig::default()
            };
            let bcd = infer(&inst.params, &inst.spec, &cfg, &inst.x.view(), &loss).unwrap();
            assert!(bcd.max_abs_diff(&exact) < 1e-8, "{}", bcd.max_abs_diff(&exact));
            checked += 1;
        }
    }
    assert_eq!(checked, 80);
}

/// With `beta` under the bound the objective after the default 20 sweeps is
/// already close to the joint optimum on small well-conditioned nets.
#[test]
fn twenty_sweeps_reach_joint_optimum() {
    let arch = Architecture::mlp(&[4, 6, 6, 3], Activation::Linear, Activation::Linear, true).unwrap();
    let spec = PotentialSpec::for_arch(&arch);
    for seed in 0..20 {
        let mut p = init_params(&arch, seed, InitScheme::UniformFanIn);
        p.scale(0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 2, 4, 1.0);
        let y = random_matrix(&mut rng, 2, 3, 1.0);
        let loss = LossTerm::minus_target(0.5 * safe_beta(&p), &y);
        let exact = solve_exact(&p, &spec, &x.view(), &loss).unwrap();
        let bcd = infer(&p, &spec, &InferenceConfig::default(), &x.view(), &loss).unwrap();
        let obj = |s: &ActivationState| potential_value(&p, &spec, s).unwrap() + loss.value(s);
        assert!((obj(&bcd) - obj(&exact)).abs() < 1e-6, "seed {seed}: {} vs {}", obj(&bcd), obj(&exact));
    }
}

/// A linear term `g^T z` moves the minimizer of `U` by `-(hess U)^{-1} g`.
#[test]
fn linear_perturbation_shifts_by_inverse_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, Activation::Linear, true, 1);
        let model = LinearModel::new(&inst.params, &inst.spec).unwrap();
        let q = model.potential(inst.x.row(0));
        let dims = inst.params.arch().layer_dims()[1..].to_vec();
        let g: Vec<Array2<f64>> = dims.iter().map(|&d| random_matrix(&mut rng, 1, d, 1e-3)).collect();
        let cfg = InferenceConfig {
            sweeps: 5000,
            ..InferenceConfig::default()
        };
        let base = forward(&inst.params, &inst.x.view()).unwrap();
        let moved = infer(
            &inst.params,
            &inst.spec,
            &cfg,
            &inst.x.view(),
            &LossTerm::none().with_perturbation(g.clone()),
        )
        .unwrap();
        let gv = model.pack(&g.iter().map(|m| m.row(0)).collect::<Vec<_>>());
        let h = DMatrix::from_fn(q.dim(), q.dim(), |i, j| q.hess[(i, j)]);
        let predicted: DVector<f64> = -h.lu().solve(&gv).unwrap();
        let shift: Vec<f64> = moved
            .layers
            .iter()
            .zip(&base.layers)
            .flat_map(|(a, b)| (a - b).into_iter())
            .collect();
        let err = predicted.iter().zip(&shift).map(|(p, s)| (p - s).abs()).fold(0.0, f64::max);
        let scale = predicted.amax();
        assert!(err <= 1e-6 * scale.max(1e-12), "err {err:e} scale {scale:e}");
    }
}

/// Reweighting the layers of a linear net changes the contrastive gradient
/// only at first order in `beta`.
#[test]
fn layer_weights_affect_gradient_at_first_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, Activation::Linear, true, 3);
        let dev = |beta: f64| {
            let grad = |gamma: Option<Vec<f64>>| {
                let mut spec = ObjectiveSpec::new(Variant::Arovr).with_beta(beta);
                spec.gamma = gamma;
                evaluate_with(&spec, &Solver::Exact, &inst.params, &inst.x.view(), &inst.y.view(), &Auxiliary::default())
                    .unwrap()
                    .grad
            };
            let mut d = grad(Some(inst.spec.gamma().to_vec()));
            let plain = grad(None);
            d.add_scaled(-1.0, &plain);
            d.norm() / plain.norm()
        };
        let (d2, d3) = (dev(1e-2), dev(1e-3));
        let slope = (d2 / d3).log10();
        assert!((slope - 1.0).abs() < 0.15, "slope {slope}");
    }
}

#[test]
fn split_targets_follow_labels() {
    let pool = synthetic_pool(3, 5, 60, 20, 0.1, 4);
    let split = make_split(&pool, 30, 20, 9, 2.0).unwrap();
    for (row, &label) in split.train.targets.outer_iter().zip(&split.train.data.labels) {
        assert_eq!(row.sum(), 2.0);
        assert_eq!(row[label], 2.0);
    }
}
