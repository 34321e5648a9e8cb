use proptest::prelude::*;
use ser_web::*;

#[test]
fn parses_mixed_separators() {
    assert_eq!(parse_numbers("1, 2;3\n 4.5").unwrap(), vec![1.0, 2.0, 3.0, 4.5]);
    assert!(parse_numbers("1 two").unwrap_err().contains("two"));
}

#[test]
fn ccc_of_identical_vectors_is_one() {
    let json = ccc_json("0.1 0.4 0.9", "0.1 0.4 0.9").unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["ccc"], 1.0);
    assert_eq!(v["n"], 3);
}

#[test]
fn ccc_penalizes_offset_but_pearson_does_not() {
    let a = agreement(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
    assert!((a.pearson - 1.0).abs() < 1e-12);
    // 2*cov / (var_t + var_e + gap^2) = (4/3) / (4/3 + 1)
    assert!((a.ccc - 4.0 / 7.0).abs() < 1e-12);
}

#[test]
fn mismatched_lengths_are_reported() {
    assert!(ccc_json("1 2 3", "1 2").is_err());
}

#[test]
fn layer_profile_finds_peak() {
    let p = layer_profile(&[0.0, 2.0, 1.0]).unwrap();
    assert_eq!(p.peak, 1);
    assert!(layer_weights_json("").is_err());
}

#[test]
fn padding_rejects_fractional_lengths() {
    assert!(padding_json("10 2.5", 2, 0).is_err());
    let json = padding_json("100 10 90 20 80 30", 2, 7).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["batches"], 3);
}

proptest! {
    #[test]
    fn layer_weights_sum_to_one(logits in prop::collection::vec(-20.0f64..20.0, 1..30)) {
        let p = layer_profile(&logits).unwrap();
        prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn bucketing_never_pads_more(lengths in prop::collection::vec(1usize..5000, 9..80), bs in 2usize..9, seed in 0u64..1000) {
        let c = padding_comparison(&lengths, bs, seed).unwrap();
        prop_assert!(c.bucketed_padding <= c.random_padding + 1e-12);
        let mut flat: Vec<usize> = c.bucketed_lengths.concat();
        let mut sorted = lengths.clone();
        flat.sort_unstable();
        sorted.sort_unstable();
        prop_assert_eq!(flat, sorted);
    }
}
