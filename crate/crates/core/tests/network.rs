mod common;

use fisherlens_core::linalg::Matrix;
use fisherlens_core::scores::{build_score_file, fisher_scores, Provenance, RawGradients};
use fisherlens_core::toynet::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gate_gradients_match_finite_differences() {
    for seed in 0..50u64 {
        let layers = 1 + (seed % 4) as usize;
        let net = common::net(seed, layers, 8);
        let data = common::task(seed, 4, 8);
        let adapters = if seed % 2 == 0 { common::trained_adapters(&net, &data, seed, 5) } else { Vec::new() };
        let worst = gradient_check(&net, &adapters, &data, 1e-4).unwrap();
        assert!(worst < 1e-4, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn router_weights_sum_to_one() {
    let a = HydraAdapter::new_seeded(8, 4, 4, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w = a.router_weights(&x);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(w.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn fisher_is_nonnegative_and_dead_units_score_zero() {
    let mut net = common::net(8, 3, 8);
    net.layers[1].heads[2].up = Matrix::zeros(8, 2);
    net.layers[2].ffn_out.row_mut(5).iter_mut().for_each(|v| *v = 0.0);
    let task = common::task(8, 16, 8);
    let adapters = common::trained_adapters(&net, &task, 8, 10);
    let sf = build_score_file(&net, &adapters, &common::pretrain(8, 16, 8), &task).unwrap();
    for l in &sf.layers {
        assert!(l.fisher_heads.iter().chain(&l.fisher_neurons).all(|&v| v >= 0.0));
    }
    assert_eq!(sf.layers[1].fisher_heads[2], 0.0);
    assert_eq!(sf.layers[2].fisher_neurons[5], 0.0);
}

#[test]
fn scores_are_deterministic_and_duplication_invariant() {
    let net = common::net(21, 3, 8);
    let task = common::task(21, 12, 8);
    let pre = common::pretrain(21, 12, 8);
    let adapters = common::trained_adapters(&net, &task, 21, 10);
    let a = build_score_file(&net, &adapters, &pre, &task).unwrap();
    let b = build_score_file(&net, &adapters, &pre, &task).unwrap();
    assert_eq!(a, b);
    let doubled = build_score_file(&net, &adapters, &pre.repeated(2), &task.repeated(2)).unwrap();
    for (x, y) in a.layers.iter().zip(&doubled.layers) {
        let close = |p: f64, q: f64| (p - q).abs() <= 1e-12 * p.abs().max(q.abs()).max(1e-300);
        assert!(x.fisher_heads.iter().zip(&y.fisher_heads).all(|(p, q)| close(*p, *q)));
        assert!(x.fisher_neurons.iter().zip(&y.fisher_neurons).all(|(p, q)| close(*p, *q)));
        assert!(close(x.taylor_head, y.taylor_head));
        assert!(close(x.taylor_neuron, y.taylor_neuron));
    }
}

#[test]
fn fisher_example_from_probe_network() {
    // Per-sample gradients 8 and -8 give a Fisher value of 64.
    let g = |v: f64| vec![GateGrads { heads: vec![v], neurons: vec![0.0] }];
    let raw = RawGradients::from_samples(Provenance::FISHER, &[g(8.0), g(-8.0)]).unwrap();
    assert_eq!(fisher_scores(&raw).unwrap()[0].0, vec![64.0]);
}

#[test]
fn adapter_training_lowers_task_loss_and_keeps_base_frozen() {
    let net = common::net(3, 4, 8);
    let task = common::task(3, 32, 8);
    let before = net.checksum();
    let all: Vec<usize> = (0..4).collect();
    let init = init_adapters(&net, &AdapterConfig { seed: 3, ..Default::default() }, &all).unwrap();
    let out = train_adapters(&net, &init, &task, 200, 1e-2, &all).unwrap();
    assert_eq!(out.loss_curve.len(), 201);
    assert!(out.loss_curve[200] < out.loss_curve[0]);
    assert_eq!(net.checksum(), before);
    let again = train_adapters(&net, &init, &task, 200, 1e-2, &all).unwrap();
    assert_eq!(out, again);
}

#[test]
fn all_ones_gates_are_bitwise_identity() {
    let net = common::net(4, 3, 8);
    let data = common::task(4, 8, 8);
    let adapters = common::trained_adapters(&net, &data, 4, 5);
    let ones: Vec<_> = net
        .layers
        .iter()
        .map(|l| fisherlens_core::ContinuousMask::ones(l.num_heads(), l.num_neurons()))
        .collect();
    for x in &data.inputs {
        let (a, _) = forward(&net, &adapters, None, x).unwrap();
        let (b, _) = forward(&net, &adapters, Some(&ones), x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
