use core::convert::Infallible;

use fisherlens_core::files::{LayerMaskRecord, MaskFile};
use fisherlens_core::rankopt::{optimize, split_trials, suggest, BOState};
use fisherlens_core::ranking::{layer_importance, rank_and_select};
use fisherlens_core::MaskSolution;
use proptest::prelude::*;

fn mask_file(values: &[Vec<f64>]) -> MaskFile {
    MaskFile::new(
        values
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let mut rec = LayerMaskRecord::from_solution(k, v.len(), 0, &MaskSolution::empty());
                rec.continuous_heads = Some(v.clone());
                rec.continuous_neurons = Some(Vec::new());
                rec
            })
            .collect(),
    )
}

proptest! {
    #[test]
    fn ranking_is_invariant_to_deviation_scale(
        layers in prop::collection::vec(prop::collection::vec(-2.0f64..3.0, 1..6), 1..8),
        scale in prop_oneof![Just(0.5f64), Just(2.0), Just(4.0), Just(0.25)],
    ) {
        let scaled: Vec<Vec<f64>> = layers.iter().map(|l| l.iter().map(|m| 1.0 + scale * (m - 1.0)).collect()).collect();
        let k = layers.len();
        let a = rank_and_select(&layer_importance(&mask_file(&layers)), k).unwrap();
        let b = rank_and_select(&layer_importance(&mask_file(&scaled)), k).unwrap();
        prop_assert_eq!(a.ranking, b.ranking);
    }

    #[test]
    fn selection_is_a_ranking_prefix(scores in prop::collection::vec(0.0f64..1.0, 1..12), k_seed in any::<usize>()) {
        let k = 1 + k_seed % scores.len();
        let imp = rank_and_select(&scores, k).unwrap();
        let mut sorted = imp.ranking.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..scores.len()).collect::<Vec<_>>());
        prop_assert_eq!(imp.selected.len(), k);
        prop_assert_eq!(&imp.selected[..], &imp.ranking[..k]);
        for w in imp.ranking.windows(2) {
            prop_assert!(scores[w[0]] >= scores[w[1]]);
        }
    }

    #[test]
    fn good_set_size_is_gamma_quantile(values in prop::collection::vec(-5.0f64..5.0, 1..60)) {
        let trials: Vec<(usize, f64)> = values.iter().enumerate().map(|(i, &v)| (2 + i % 15, v)).collect();
        let (good, bad) = split_trials(&trials, 0.25);
        prop_assert_eq!(good.len(), (0.25 * trials.len() as f64).ceil() as usize);
        prop_assert_eq!(good.len() + bad.len(), trials.len());
    }
}

fn objectives() -> Vec<(usize, Box<dyn Fn(usize) -> f64>)> {
    vec![
        (4, Box::new(|r| (r as f64 - 4.0).powi(2))),
        (7, Box::new(|r| (r as f64 - 7.0).powi(2))),
        (12, Box::new(|r| (r as f64 - 12.0).abs())),
        (2, Box::new(|r| r as f64)),
        (16, Box::new(|r| -(r as f64).sqrt())),
    ]
}

#[test]
fn budget_fifteen_always_evaluates_the_argmin() {
    for (target, f) in objectives() {
        for seed in 0..20 {
            let out = optimize(|r| Ok::<_, Infallible>(f(r)), 2, 16, 15, seed).unwrap();
            assert!(out.history.iter().any(|&(r, _)| r == target), "target {target} seed {seed}");
            assert_eq!(out.best_rank, target);
        }
    }
}

#[test]
fn search_history_is_reproducible() {
    let f = |r: usize| Ok::<_, Infallible>((r as f64 - 7.0).powi(2) + 0.1 * r as f64);
    let a = optimize(f, 2, 16, 40, 5).unwrap();
    let b = optimize(f, 2, 16, 40, 5).unwrap();
    assert_eq!(a, b);
    let c = optimize(f, 2, 16, 40, 6).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn best_so_far_never_increases() {
    let out = optimize(|r| Ok::<_, Infallible>(((r * 37) % 11) as f64), 2, 16, 50, 1).unwrap();
    let mut best = f64::INFINITY;
    let mut prev = f64::INFINITY;
    for &(_, v) in &out.history {
        best = best.min(v);
        assert!(best <= prev);
        prev = best;
    }
    assert_eq!(best, out.best_value);
}

#[test]
fn objective_failure_reports_trial() {
    let err = optimize(|r| if r == 0 { Ok(0.0) } else { Err("boom") }, 2, 16, 5, 0).unwrap_err();
    assert!(matches!(err, fisherlens_core::rankopt::OptimizeError::Objective { trial: 0, .. }));
    let s = BOState::new(3, 3, 0).unwrap();
    assert_eq!(suggest(&s).unwrap(), 3);
}
