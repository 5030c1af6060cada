use fisherlens::io::{read_mask_file, read_ranking_file, read_score_file, to_json, write_json};
use fisherlens_core::files::{LayerMaskRecord, MaskFile, RankingFile, ScoreFile};
use fisherlens_core::types::rank_descending;
use fisherlens_core::{LayerComponentScores, LayerImportance};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |v| v.is_finite())
}

fn nonneg() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 0.0f64..1e6, (0.0f64..1.0).prop_map(|v| v * 1e-300)]
}

fn positive() -> impl Strategy<Value = f64> {
    prop_oneof![1e-12f64..1e6, Just(f64::MIN_POSITIVE)]
}

fn score_layer() -> impl Strategy<Value = LayerComponentScores> {
    (
        0usize..64,
        prop::collection::vec(nonneg(), 1..6),
        prop::collection::vec(nonneg(), 1..9),
        positive(),
        positive(),
    )
        .prop_map(|(k, h, n, th, tf)| LayerComponentScores::new(k, h, n, th, tf).unwrap())
}

fn mask_record() -> impl Strategy<Value = LayerMaskRecord> {
    (
        (0usize..64, 1usize..6, 1usize..9),
        finite(),
        finite(),
        any::<bool>(),
        prop::collection::vec(finite(), 0..6),
        prop::collection::vec(finite(), 0..9),
        prop::collection::vec(any::<bool>(), 14),
    )
        .prop_map(|((layer, nh, nf), fisher, taylor, tuned, ch, cn, pick)| LayerMaskRecord {
            layer,
            num_heads: nh,
            num_neurons: nf,
            masked_heads: (0..nh).filter(|&i| pick[i]).collect(),
            masked_neurons: (0..nf).filter(|&i| pick[6 + i]).collect(),
            fisher_loss: fisher,
            taylor_used: taylor,
            continuous_heads: tuned.then_some(ch),
            continuous_neurons: tuned.then_some(cn),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn score_files_round_trip(layers in prop::collection::vec(score_layer(), 0..5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.json");
        let f = ScoreFile::new(layers);
        write_json(&path, &f).unwrap();
        let back = read_score_file(&path).unwrap();
        prop_assert_eq!(to_json(&back).unwrap(), std::fs::read_to_string(&path).unwrap());
        prop_assert_eq!(back, f);
    }

    #[test]
    fn mask_files_round_trip(layers in prop::collection::vec(mask_record(), 0..5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masks.json");
        let f = MaskFile::new(layers);
        write_json(&path, &f).unwrap();
        let back = read_mask_file(&path).unwrap();
        prop_assert_eq!(to_json(&back).unwrap(), std::fs::read_to_string(&path).unwrap());
        prop_assert_eq!(back, f);
    }

    #[test]
    fn ranking_files_round_trip(scores in prop::collection::vec(finite(), 1..12), k in 1usize..12) {
        let ranking = rank_descending(&scores);
        let k = k.min(scores.len());
        let imp = LayerImportance { selected: ranking[..k].to_vec(), ranking, scores };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranking.json");
        write_json(&path, &RankingFile::from(&imp)).unwrap();
        let back = read_ranking_file(&path).unwrap();
        prop_assert_eq!(LayerImportance::from(back), imp);
    }
}

#[test]
fn wrong_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("masks.json");
    let mut f = MaskFile::new(Vec::new());
    f.format_version = 99;
    write_json(&path, &f).unwrap();
    let err = read_mask_file(&path).unwrap_err();
    assert!(format!("{err:#}").contains("format_version 99"));
}

#[test]
fn invalid_scores_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.json");
    std::fs::write(
        &path,
        r#"{"format_version":1,"layers":[{"layer":0,"fisher_heads":[-1.0],"fisher_neurons":[1.0],"taylor_head":1.0,"taylor_neuron":1.0}]}"#,
    )
    .unwrap();
    assert!(read_score_file(&path).is_err());
}

#[test]
fn reals_parse_back_to_the_same_bits() {
    use rand::Rng;
    let mut r = fisherlens_core::seed::rng(1);
    let mut values: Vec<f64> = (0..200_000).map(|_| r.random_range(0.0..4.0)).collect();
    values.push(1.0628179034247431);
    for v in values {
        let back: f64 = serde_json::from_str(&to_json(&v).unwrap()).unwrap();
        assert_eq!(back.to_bits(), v.to_bits(), "{v:?}");
    }
}
