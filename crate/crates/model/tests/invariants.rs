use candle_core::{Device, Tensor};
use proptest::prelude::*;
use ser_core::corpus::UtteranceRecord;
use ser_core::metrics::{ccc, normalize_text, wer};
use ser_core::Dimension;
use ser_model::asr::{Distortion, LookupTranscriber};
use ser_model::loss::{ccc_columns, ccc_loss};
use ser_model::probe::ProbeProfile;
use ser_model::trainer::TrainConfig;

fn columns(rows: &[(f64, f64)]) -> (Tensor, Tensor) {
    let p: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let t: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let n = rows.len();
    (
        Tensor::from_vec(p, (n, 1), &Device::Cpu).unwrap(),
        Tensor::from_vec(t, (n, 1), &Device::Cpu).unwrap(),
    )
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["so", "the", "day", "went", "great", "awful", "um", "really"]), 1..20)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn tensor_ccc_matches_scalar_metric(rows in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 2..40)) {
        let (p, t) = columns(&rows);
        let got = ccc_columns(&p, &t).unwrap().to_vec1::<f64>().unwrap()[0];
        let est: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let gold: Vec<f64> = rows.iter().map(|r| r.1).collect();
        prop_assert!((got - ccc(&gold, &est).unwrap()).abs() < 1e-9);
        let loss = ccc_loss(&p, &t).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&loss));
    }

    #[test]
    fn probe_weights_normalized_and_shift_invariant(logits in prop::collection::vec(-30.0f64..30.0, 1..26), shift in -50.0f64..50.0) {
        let a = ProbeProfile::from_logits(Dimension::Valence, logits.clone()).unwrap();
        prop_assert!(a.check_normalized().is_ok());
        let b = ProbeProfile::from_logits(Dimension::Valence, logits.iter().map(|l| l + shift).collect()).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert_eq!(a.argmax(), b.argmax());
    }

    #[test]
    fn train_config_toml_round_trips(lr in 1e-7f64..1e-1, bs in 2usize..128, dropout in 0.0f64..0.9, patience in 1usize..20, seed in any::<u64>()) {
        let config = TrainConfig { learning_rate: lr, batch_size: bs, dropout, patience, seed, ..TrainConfig::default() };
        let back = TrainConfig::from_toml_str(&config.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back, config);
    }

    #[test]
    fn dropping_every_second_word_deletes_half(text in words()) {
        let n = normalize_text(&text).len();
        let t = LookupTranscriber::new(&[] as &[UtteranceRecord], Distortion::DropEverySecondWord);
        let w = wer(&text, &t.distort(&text)).unwrap();
        prop_assert_eq!(w.substitutions + w.insertions, 0);
        prop_assert_eq!(w.deletions, n / 2);
    }

    #[test]
    fn filler_shuffle_keeps_the_word_multiset(text in words(), seed in any::<u64>()) {
        let t = LookupTranscriber::new(&[] as &[UtteranceRecord], Distortion::ShuffleFillers { seed });
        let mut before = normalize_text(&text);
        let mut after = normalize_text(&t.distort(&text));
        before.sort();
        after.sort();
        prop_assert_eq!(before, after);
    }
}
