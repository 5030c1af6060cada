mod common;

use fisherlens_core::linalg::{norm, Matrix};
use fisherlens_core::masksolve::solve_layer;
use fisherlens_core::masktune::*;
use fisherlens_core::oracle::oracle_least_squares;
use fisherlens_core::scores::build_score_file;
use fisherlens_core::types::{resolve_budget, Budget, Component, MaskSolution};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random system whose columns are a perturbed orthogonal-ish basis.
fn system(seed: u64, rows: usize, cols: usize) -> ReconstructionSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design = Matrix::from_fn(rows, cols, |r, c| {
        let base = if r % cols == c { 2.0 } else { 0.0 };
        base + rng.random_range(-0.5..0.5)
    });
    let rhs = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    ReconstructionSystem { design, rhs }
}

fn normal_residual(sys: &ReconstructionSystem, u: &[f64]) -> f64 {
    let au = sys.design.matvec(u);
    let r: Vec<f64> = au.iter().zip(&sys.rhs).map(|(a, b)| a - b).collect();
    norm(&sys.design.matvec_t(&r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closed_form_matches_coordinate_descent(seed in any::<u64>(), cols in 1usize..=8, extra in 0usize..12) {
        let sys = system(seed, cols + 2 + extra, cols);
        let closed = solve_relaxation(&sys).unwrap();
        let oracle = oracle_least_squares(&sys).unwrap();
        for (a, b) in closed.values.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
        let u = closed.offsets();
        prop_assert!(normal_residual(&sys, &u) <= 1e-8 + closed.ridge * norm(&u));
    }

    #[test]
    fn residual_bound_with_duplicate_columns(seed in any::<u64>()) {
        let base = system(seed, 12, 3);
        let design = Matrix::from_fn(12, 4, |r, c| base.design.get(r, c.min(2)));
        let sys = ReconstructionSystem { design, rhs: base.rhs };
        let relaxed = solve_relaxation(&sys).unwrap();
        let u = relaxed.offsets();
        prop_assert!(relaxed.ridge > 0.0);
        prop_assert!(normal_residual(&sys, &u) <= 1e-8 + relaxed.ridge * norm(&u));
    }
}

#[test]
fn oracle_examples() {
    let zero = ReconstructionSystem { design: system(1, 6, 2).design, rhs: vec![0.0; 6] };
    for m in oracle_least_squares(&zero).unwrap() {
        assert!((m - 1.0).abs() < 1e-12);
    }
    let scalar = ReconstructionSystem { design: Matrix::from_rows(&[&[6.0]]), rhs: vec![0.5] };
    assert!((oracle_least_squares(&scalar).unwrap()[0] - 1.0833333333333333).abs() < 1e-6);
    let sys = system(7, 10, 3);
    let a = solve_relaxation(&sys).unwrap().values;
    let b = oracle_least_squares(&sys).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6);
    }
}

struct Tuned {
    net: fisherlens_core::toynet::ToyNetwork,
    adapters: Vec<fisherlens_core::toynet::LayerAdapters>,
    binary: Vec<MaskSolution>,
    calib: fisherlens_core::toynet::Dataset,
}

fn tuned_setup(seed: u64) -> Tuned {
    let net = common::net(seed, 4, 8);
    let task = common::task(seed, 24, 8);
    let adapters = common::trained_adapters(&net, &task, seed, 30);
    let scores = build_score_file(&net, &adapters, &common::pretrain(seed, 24, 8), &task).unwrap();
    let binary = scores
        .layers
        .iter()
        .map(|s| solve_layer(s, resolve_budget(Budget::Fraction(0.5), s), true).unwrap())
        .collect();
    Tuned { net, adapters, binary, calib: task }
}

#[test]
fn tuned_error_never_exceeds_binary() {
    for seed in 0..20 {
        let t = tuned_setup(seed);
        let out = tune_all_layers(&t.net, &t.adapters, &t.binary, &t.calib, Linearization::default()).unwrap();
        assert_eq!(out.reports.len(), 8);
        for r in &out.reports {
            assert!(
                r.tuned_error <= r.binary_error,
                "seed {seed} layer {} {}: {} > {}",
                r.layer,
                r.component,
                r.tuned_error,
                r.binary_error
            );
        }
    }
}

#[test]
fn tuned_masks_are_locally_optimal() {
    let t = tuned_setup(3);
    let gates = binary_gates(&t.net, &t.binary).unwrap();
    let traces = calibration_traces(&t.net, &t.adapters, &gates, &t.calib).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 0..t.net.num_layers() {
        let (tuned, _) = tune_layer(&t.net, &t.adapters, k, &gates[k], &traces, Linearization::default()).unwrap();
        for component in [Component::Head, Component::Neuron] {
            let xc: Vec<Vec<f64>> = traces.clean.iter().map(|tr| tr.input(k, component).to_vec()).collect();
            let xm: Vec<Vec<f64>> = traces.masked.iter().map(|tr| tr.input(k, component).to_vec()).collect();
            let adapter = match component {
                Component::Head => t.adapters[k].mha.as_ref(),
                Component::Neuron => t.adapters[k].ffn.as_ref(),
            };
            let samples = sublayer_samples(&t.net.layers[k], adapter, component, &xc, &xm).unwrap();
            let m = tuned.values(component).to_vec();
            let base = reconstruction_error(&samples, &m);
            for _ in 0..100 {
                let mut p = m.clone();
                let i = rng.random_range(0..p.len());
                p[i] += if rng.random::<bool>() { 1e-3 } else { -1e-3 };
                assert!(reconstruction_error(&samples, &p) >= base, "layer {k} {component} unit {i}");
            }
        }
    }
}

#[test]
fn all_ones_binary_stays_ones() {
    let t = tuned_setup(5);
    let keep: Vec<MaskSolution> = t.binary.iter().map(|_| MaskSolution::empty()).collect();
    let out = tune_all_layers(&t.net, &t.adapters, &keep, &t.calib, Linearization::default()).unwrap();
    for m in &out.masks {
        assert!(m.head_values.iter().chain(&m.neuron_values).all(|&v| v == 1.0));
    }
    for r in &out.reports {
        assert_eq!(r.binary_error, 0.0);
        assert_eq!(r.tuned_error, 0.0);
    }
}

#[test]
fn first_layer_attention_sees_no_shift() {
    let net = common::net(11, 1, 8);
    let calib = common::task(11, 10, 8);
    let binary = vec![MaskSolution { masked_heads: vec![0, 2], masked_neurons: vec![1], fisher_loss: 0.0, taylor_used: 0.0 }];
    let out = tune_all_layers(&net, &[], &binary, &calib, Linearization::default()).unwrap();
    assert!(out.masks[0].head_values.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    // The FFN sees the masked attention output, so it has a real system to solve.
    let ffn = &out.reports[1];
    assert!(ffn.binary_error > 0.0);
    assert!(ffn.tuned_error <= ffn.binary_error);
}

#[test]
fn build_system_checks_shapes() {
    let net = common::net(1, 1, 8);
    let x = vec![vec![0.0; 8]];
    let bad = build_system(&net.layers[0], None, Component::Head, &[1.0; 3], &x, &x, Linearization::default());
    assert!(matches!(bad, Err(TuneError::DimensionMismatch { .. })));
    let sys = build_system(&net.layers[0], None, Component::Head, &[1.0; 4], &x, &x, Linearization::CleanInput).unwrap();
    assert!(sys.rhs.iter().all(|&b| b == 0.0));
}
