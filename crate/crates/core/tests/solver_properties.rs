mod common;

use fisherlens_core::masksolve::{greedy_mask_search, refine_masks_counted, solve_layer};
use fisherlens_core::oracle::{oracle_greedy, oracle_refine_bfs};
use fisherlens_core::types::{validate_scores, Component, LayerComponentScores};
use proptest::prelude::*;

fn perturbed_scores() -> impl Strategy<Value = (LayerComponentScores, bool)> {
    let value = prop_oneof![
        8 => (0.0f64..10.0).prop_map(|v| (v, true)),
        1 => (-10.0f64..-1e-9).prop_map(|v| (v, false)),
        1 => Just((f64::NAN, false)),
        1 => Just((f64::INFINITY, false)),
    ];
    let taylor = prop_oneof![
        8 => (1e-9f64..5.0).prop_map(|v| (v, true)),
        1 => (-5.0f64..=0.0).prop_map(|v| (v, false)),
        1 => Just((f64::NAN, false)),
    ];
    (
        prop::collection::vec(value.clone(), 0..5),
        prop::collection::vec(value, 0..5),
        taylor.clone(),
        taylor,
    )
        .prop_map(|(h, n, th, tf)| {
            let ok = !h.is_empty()
                && !n.is_empty()
                && h.iter().chain(&n).all(|v| v.1)
                && th.1
                && tf.1
                && th.0.is_finite()
                && tf.0.is_finite();
            let s = LayerComponentScores {
                layer_index: 0,
                fisher_heads: h.into_iter().map(|v| v.0).collect(),
                fisher_neurons: n.into_iter().map(|v| v.0).collect(),
                taylor_head: th.0,
                taylor_neuron: tf.0,
            };
            (s, ok)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn validation_accepts_exactly_valid_instances((s, ok) in perturbed_scores()) {
        prop_assert_eq!(validate_scores(&s).is_ok(), ok);
    }

    #[test]
    fn greedy_matches_exhaustive_family(seed in any::<u64>()) {
        let (s, c) = common::instance(seed, 6, 8);
        let g = greedy_mask_search(&s, c).unwrap();
        let o = oracle_greedy(&s, c).unwrap();
        prop_assert!(g.taylor_used <= c);
        prop_assert_eq!(&g.masked_heads, &o.masked_heads);
        prop_assert_eq!(&g.masked_neurons, &o.masked_neurons);
        prop_assert_eq!(g.fisher_loss.to_bits(), o.fisher_loss.to_bits());
        prop_assert_eq!(g, greedy_mask_search(&s, c).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn refine_reaches_bfs_minimum(seed in any::<u64>()) {
        let (s, c) = common::instance(seed, 4, 5);
        let g = greedy_mask_search(&s, c).unwrap();
        let (r, swaps) = refine_masks_counted(&s, &g, c).unwrap();
        prop_assert!(r.fisher_loss <= g.fisher_loss);
        prop_assert!(r.taylor_used <= g.taylor_used);
        prop_assert!(r.taylor_used <= c);
        let bound = s.num_heads() * s.num_neurons() + s.num_heads() + s.num_neurons();
        prop_assert!(swaps <= bound);
        let best = oracle_refine_bfs(&s, &g, c).unwrap();
        prop_assert_eq!(r.fisher_loss.to_bits(), best.to_bits());
        prop_assert_eq!(r, solve_layer(&s, c, true).unwrap());
    }

    #[test]
    fn refine_is_monotone_from_any_feasible_start(seed in any::<u64>(), pick in any::<u64>()) {
        let (s, c) = common::instance(seed, 4, 5);
        // Random feasible start: mask units in a seeded order while they fit.
        let mut heads = Vec::new();
        let mut neurons = Vec::new();
        let mut used = 0.0;
        for u in 0..s.num_heads() + s.num_neurons() {
            if (pick >> u) & 1 == 0 {
                continue;
            }
            let (comp, i) = if u < s.num_heads() { (Component::Head, u) } else { (Component::Neuron, u - s.num_heads()) };
            if used + s.taylor(comp) <= c {
                used += s.taylor(comp);
                match comp {
                    Component::Head => heads.push(i),
                    Component::Neuron => neurons.push(i),
                }
            }
        }
        let start = fisherlens_core::MaskSolution::from_sets(&s, heads, neurons);
        prop_assume!(start.taylor_used <= c);
        let (r, _) = refine_masks_counted(&s, &start, c).unwrap();
        prop_assert!(r.fisher_loss <= start.fisher_loss);
        prop_assert!(r.taylor_used <= start.taylor_used);
        prop_assert!(oracle_refine_bfs(&s, &start, c).unwrap() <= r.fisher_loss);
    }
}

#[test]
fn oracle_examples() {
    let s = LayerComponentScores::new(0, vec![5.0, 1.0], vec![0.5, 2.0, 0.1], 2.0, 1.0).unwrap();
    let g = greedy_mask_search(&s, 3.0).unwrap();
    assert_eq!(oracle_greedy(&s, 3.0).unwrap(), g);
    assert_eq!(oracle_greedy(&s, 0.0).unwrap().masked_heads, Vec::<usize>::new());
    assert_eq!(oracle_refine_bfs(&s, &g, 3.0).unwrap(), 0.6);
    let empty = fisherlens_core::MaskSolution::empty();
    assert_eq!(oracle_refine_bfs(&s, &empty, 3.0).unwrap(), 0.0);
}

#[test]
fn duplicate_values_share_tie_rules() {
    for seed in 0..200 {
        let (mut s, c) = common::instance(seed, 6, 8);
        for v in s.fisher_heads.iter_mut().chain(s.fisher_neurons.iter_mut()) {
            *v = (*v * 4.0).floor() / 4.0;
        }
        assert_eq!(greedy_mask_search(&s, c).unwrap(), oracle_greedy(&s, c).unwrap(), "seed {seed}");
    }
}
