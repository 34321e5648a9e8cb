//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.
//!
//! `cargo test -p ser-model --test acceptance [-- 1 4 9]` runs a subset.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ser_core::corpus::{generate_synthetic_corpus, plan_buckets_by_length, random_grouping, UtteranceRecord};
use ser_core::metrics::{ccc, wer_tokens, CccReport};
use ser_core::{Dimension, Partition};
use ser_model::asr::{transcript_study, Distortion, LookupTranscriber, StudyArm, TranscriptionSource};
use ser_model::encoders::{self, load_encoder, preset, tiny_audio, Encoder, FreezePolicy};
use ser_model::loss::ccc_loss;
use ser_model::model::{pool, PoolingMode, SerModel, SerModelConfig};
use ser_model::params::ForwardCtx;
use ser_model::probe::fit_probe_observed;
use ser_model::trainer::{evaluate, train, train_frozen_head, Regime, TrainConfig, TrainLog};

type Outcome = Result<String, String>;

fn ensure(ok: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(message())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

/// Two-pass population moments, written out term by term.
fn ccc_oracle(t: &[f64], e: &[f64]) -> f64 {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let me = e.iter().sum::<f64>() / n;
    let vt = t.iter().map(|x| (x - mt) * (x - mt)).sum::<f64>() / n;
    let ve = e.iter().map(|x| (x - me) * (x - me)).sum::<f64>() / n;
    let cov = t.iter().zip(e).map(|(a, b)| (a - mt) * (b - me)).sum::<f64>() / n;
    let den = vt + ve + (mt - me) * (mt - me);
    if den < 1e-12 {
        0.0
    } else {
        2.0 * cov / den
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let slope: f64 = rng.random_range(-2.0..2.0);
        let offset: f64 = rng.random_range(-1.0..1.0);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e: Vec<f64> = t.iter().map(|x| slope * x + offset + rng.random_range(-1.0..1.0)).collect();
        worst = worst.max((ccc(&t, &e).map_err(err)? - ccc_oracle(&t, &e)).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    let fixed = [
        (vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], 1.0),
        (vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 4.0], 6.0 / 7.0),
        (vec![0.0, 1.0], vec![0.5, 0.5], 0.0),
        (vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0], -1.0),
    ];
    for (t, e, want) in fixed {
        let got = ccc(&t, &e).map_err(err)?;
        ensure(got == want, || format!("ccc({t:?}, {e:?}) = {got:?}, expected {want:?}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("max deviation {worst:.1e}, fixed cases exact, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- 2

/// Edit distance straight from its recursive definition, memoized.
fn edit_distance_oracle(r: &[u8], h: &[u8]) -> usize {
    fn go(r: &[u8], h: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        if let Some(&d) = memo.get(&(r.len(), h.len())) {
            return d;
        }
        let sub = go(&r[1..], &h[1..], memo) + usize::from(r[0] != h[0]);
        let del = go(&r[1..], h, memo) + 1;
        let ins = go(r, &h[1..], memo) + 1;
        let d = sub.min(del).min(ins);
        memo.insert((r.len(), h.len()), d);
        d
    }
    go(r, h, &mut HashMap::new())
}

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..alphabet).map(move |w| {
                    let mut next = s.clone();
                    next.push(w);
                    next
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let words = ["yes", "no", "maybe"];
    let sequences = all_sequences(6, 3);
    let as_words = |s: &[u8]| s.iter().map(|&w| words[w as usize]).collect::<Vec<_>>();
    let mut pairs = 0usize;
    for r in sequences.iter().filter(|s| !s.is_empty()) {
        let rw = as_words(r);
        for h in &sequences {
            let result = wer_tokens(&rw, &as_words(h)).map_err(err)?;
            let want = edit_distance_oracle(r, h);
            ensure(result.errors() == want, || format!("{r:?} vs {h:?}: {} errors, oracle {want}", result.errors()))?;
            ensure(h.len() + result.deletions == r.len() + result.insertions, || format!("{r:?} vs {h:?}: inconsistent counts"))?;
            ensure(result.wer == want as f64 / r.len() as f64, || format!("{r:?} vs {h:?}: wer {}", result.wer))?;
            pairs += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{pairs} pairs agree, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let corpus = generate_synthetic_corpus(40, 3, 16_000).map_err(err)?;
    let items: Vec<&UtteranceRecord> = corpus.iter().take(8).collect();
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut config = SerModelConfig::audio_only(tiny_audio(2, 16, 100 + seed));
        config.head_seed = seed;
        let model = SerModel::with_dtype(config, DType::F64).map_err(err)?;
        let features = model.features(&items, 8).map_err(err)?;
        let rows: Vec<f64> = items.iter().flat_map(|r| r.labels.to_array()).collect();
        let target = Tensor::from_vec(rows, (items.len(), 3), features.device()).map_err(err)?;
        let loss = |m: &SerModel| -> Result<Tensor, String> {
            let pred = m.head().forward(&features, &ForwardCtx::eval()).map_err(err)?;
            ccc_loss(&pred, &target).map_err(err)
        };
        let grads = loss(&model)?.backward().map_err(err)?;
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for (name, var) in model.head_params().iter() {
            let analytic = grads
                .get(var.as_tensor())
                .ok_or_else(|| format!("no gradient for {name}"))?
                .flatten_all()
                .and_then(|g| g.to_vec1::<f64>())
                .map_err(err)?;
            let base = var.as_tensor().flatten_all().and_then(|t| t.to_vec1::<f64>()).map_err(err)?;
            let shape = var.as_tensor().shape().clone();
            for (i, &a) in analytic.iter().enumerate() {
                let probe = |delta: f64| -> Result<f64, String> {
                    let mut values = base.clone();
                    values[i] += delta;
                    var.set(&Tensor::from_vec(values, shape.clone(), var.device()).map_err(err)?).map_err(err)?;
                    loss(&model)?.to_scalar::<f64>().map_err(err)
                };
                let numeric = (probe(1e-4)? - probe(-1e-4)?) / 2e-4;
                diff += (a - numeric).powi(2);
                norm_a += a * a;
                norm_n += numeric * numeric;
            }
            var.set(&Tensor::from_vec(base, shape, var.device()).map_err(err)?).map_err(err)?;
        }
        let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-300);
        ensure(rel < 1e-3, || format!("seed {seed}: relative error {rel:e}"))?;
        worst = worst.max(rel);
    }
    Ok(format!("worst relative error {worst:.1e} over 5 seeds"))
}

// ---------------------------------------------------------------- 4, 6, 9

/// Shared by criteria 4, 6 and 9.
struct ModalityRuns {
    corpus: Vec<UtteranceRecord>,
    config: TrainConfig,
    audio_model: SerModel,
    audio_log: TrainLog,
    audio: CccReport,
    audiotext: CccReport,
    elapsed: Duration,
}

fn synthetic_config() -> TrainConfig {
    TrainConfig { learning_rate: 1e-3, max_epochs: 10, patience: 5, seed: 1, ..TrainConfig::default() }
}

fn audio_spec() -> encoders::EncoderSpec {
    tiny_audio(2, 32, 3)
}

fn text_spec() -> Result<encoders::EncoderSpec, String> {
    preset("tiny-text-2x32", 5).map_err(err)
}

fn modality_runs() -> Result<ModalityRuns, String> {
    let start = Instant::now();
    let corpus = generate_synthetic_corpus(1000, 7, 16_000).map_err(err)?;
    let config = synthetic_config();
    let audio_model = SerModel::new(SerModelConfig::audio_only(audio_spec())).map_err(err)?;
    let (audio_model, audio_log) = train(audio_model, &corpus, Regime::AudioFt, &config).map_err(err)?;
    let audio = evaluate(&audio_model, &corpus, Partition::Test1).map_err(err)?;
    let at_model = SerModel::new(SerModelConfig::audio_text(audio_spec(), text_spec()?)).map_err(err)?;
    let (at_model, _) = train(at_model, &corpus, Regime::AudiotextFt, &config).map_err(err)?;
    let audiotext = evaluate(&at_model, &corpus, Partition::Test1).map_err(err)?;
    Ok(ModalityRuns { corpus, config, audio_model, audio_log, audio, audiotext, elapsed: start.elapsed() })
}

fn criterion_4(runs: &ModalityRuns) -> Outcome {
    let a = runs.audio.get(Dimension::Arousal);
    let v = runs.audio.get(Dimension::Valence);
    let tv = runs.audiotext.get(Dimension::Valence);
    ensure(a >= 0.8, || format!("audio arousal {a:.3} < 0.8"))?;
    ensure(v <= 0.3, || format!("audio valence {v:.3} > 0.3"))?;
    ensure(tv >= 0.8, || format!("audio+text valence {tv:.3} < 0.8"))?;
    ensure(runs.elapsed < Duration::from_secs(600), || format!("took {:?}", runs.elapsed))?;
    Ok(format!(
        "audio arousal {a:.3}, audio valence {v:.3}, audio+text valence {tv:.3}, {:.0?}",
        runs.elapsed
    ))
}

fn criterion_6(runs: &ModalityRuns) -> Outcome {
    let tuned = runs.audio_model.try_clone().map_err(err)?;
    let text = load_encoder(&text_spec()?).map_err(err)?;
    let (fused, _) = train_frozen_head(tuned, text, &runs.corpus, &runs.config).map_err(err)?;
    let frz = evaluate(&fused, &runs.corpus, Partition::Test1).map_err(err)?.get(Dimension::Valence);
    let ft = runs.audiotext.get(Dimension::Valence);
    let audio = runs.audio.get(Dimension::Valence);
    ensure(ft >= frz && frz >= audio, || format!("valence order broken: FT {ft:.3}, FT=>FRZ {frz:.3}, audio {audio:.3}"))?;
    ensure(ft - audio >= 0.3, || format!("FT - audio = {:.3} < 0.3", ft - audio))?;
    Ok(format!("valence FT {ft:.3} >= FT=>FRZ {frz:.3} >= audio {audio:.3}"))
}

fn criterion_9(runs: &ModalityRuns) -> Outcome {
    let model = SerModel::new(SerModelConfig::audio_only(audio_spec())).map_err(err)?;
    let (again, log) = train(model, &runs.corpus, Regime::AudioFt, &runs.config).map_err(err)?;
    let first = runs.audio_log.to_jsonl().map_err(err)?;
    let second = log.to_jsonl().map_err(err)?;
    ensure(first.as_bytes() == second.as_bytes(), || "train logs differ".into())?;
    for p in [Partition::Development, Partition::Test1, Partition::Test2] {
        let a = evaluate(&runs.audio_model, &runs.corpus, p).map_err(err)?;
        let b = evaluate(&again, &runs.corpus, p).map_err(err)?;
        ensure(a == b, || format!("{} reports differ", p.name()))?;
    }
    Ok(format!("{} log bytes identical, reports equal", first.len()))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let base = generate_synthetic_corpus(200, 5, 16_000).map_err(err)?;
    let encoder = Encoder::load(&tiny_audio(4, 32, 11), DType::F32).map_err(err)?.apply_freeze(FreezePolicy::ALL);
    // Pooled states of every layer for every record.
    let mut pooled: Vec<Vec<Vec<f64>>> = Vec::with_capacity(base.len());
    for r in &base {
        let batch = encoder.audio_batch(&[r.audio.as_slice()]).map_err(err)?;
        let out = encoder.encode(&batch, &ForwardCtx::eval()).map_err(err)?;
        let layers = out
            .layer_states
            .iter()
            .map(|s| {
                pool(s, &out.valid_lengths, PoolingMode::Sum)
                    .and_then(|p| Ok(p.to_dtype(DType::F64)?.to_vec2::<f64>()?.remove(0)))
                    .map_err(err)
            })
            .collect::<Result<Vec<_>, _>>()?;
        pooled.push(layers);
    }
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 16,
        dropout: 0.0,
        max_epochs: 60,
        patience: 60,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut found = Vec::new();
    let mut steps = 0usize;
    let mut worst_sum: f64 = 0.0;
    for k in [0usize, 2, 4] {
        // Target: fixed random readout of layer k, scaled to [0, 1].
        let mut rng = ChaCha8Rng::seed_from_u64(40 + k as u64);
        let readout: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = pooled.iter().map(|l| l[k].iter().zip(&readout).map(|(x, w)| x * w).sum()).collect();
        let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let mut corpus = base.clone();
        for (r, v) in corpus.iter_mut().zip(&raw) {
            r.labels.arousal = (v - lo) / (hi - lo);
        }
        let fit = fit_probe_observed(&encoder, &corpus, Dimension::Arousal, &config, PoolingMode::Sum, &mut |p| {
            steps += 1;
            worst_sum = worst_sum.max((p.weights.iter().sum::<f64>() - 1.0).abs());
        })
        .map_err(err)?;
        let got = fit.profile.argmax();
        ensure(got == k, || format!("layer {k}: argmax {got}, weights {:?}", fit.profile.weights))?;
        found.push(format!("{k}->{got} ({:.2})", fit.profile.weights[got]));
    }
    ensure(worst_sum <= 1e-6, || format!("weights sum off by {worst_sum:e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("{}; {steps} steps, max |sum-1| {worst_sum:.1e}, {elapsed:.0?}", found.join(", ")))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut strict, mut worse) = (0, 0);
    for trial in 0..100u64 {
        let n = rng.random_range(40..400);
        let lo = rng.random_range(1_000..20_000);
        let hi = lo + rng.random_range(1_000..200_000);
        let items: Vec<(String, usize)> = (0..n).map(|i| (format!("u{i}"), rng.random_range(lo..hi))).collect();
        let bucketed = plan_buckets_by_length(&items, 16, trial).map_err(err)?.padding_ratio;
        let random = random_grouping(&items, 16, trial).map_err(err)?.padding_ratio;
        if bucketed > random {
            worse += 1;
        } else if bucketed < random {
            strict += 1;
        }
    }
    ensure(worse == 0, || format!("{worse} distributions padded more than random grouping"))?;
    ensure(strict >= 95, || format!("strict improvement on only {strict}/100"))?;
    Ok(format!("never worse, strictly better on {strict}/100"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let corpus = generate_synthetic_corpus(1000, 7, 16_000).map_err(err)?;
    let model_config = SerModelConfig::audio_text(audio_spec(), text_spec()?);
    let shuffle = LookupTranscriber::new(&corpus, Distortion::ShuffleFillers { seed: 9 });
    let arms = [
        StudyArm { source: TranscriptionSource::human(), transcriber: None },
        StudyArm { source: TranscriptionSource::asr("keyword-preserving shuffle", None), transcriber: Some(&shuffle) },
    ];
    let report = transcript_study(&model_config, &corpus, &arms, &synthetic_config(), Partition::Test1).map_err(err)?;
    let human = report.rows[0].report.get(Dimension::Valence);
    let noisy = report.rows[1].report.get(Dimension::Valence);
    let wer = report.rows[1].wer.unwrap_or(0.0);
    ensure(wer > 0.0, || "noisy transcripts equal the human ones".into())?;
    ensure((human - noisy).abs() < 0.05, || format!("valence {human:.3} vs {noisy:.3}"))?;
    Ok(format!("valence {human:.3} (human) vs {noisy:.3} at WER {:.1}%", 100.0 * wer))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let expected = [
        ("distilhubert", 2, None, 768),
        ("hubert-base", 12, None, 768),
        ("w2v2-l-robust-p", 12, Some(24), 1024),
        ("tinybert-4l", 4, None, 312),
    ];
    let mut seen = Vec::new();
    for (name, layers, of, hidden) in expected {
        let spec = preset(name, 0).map_err(err)?;
        spec.validate().map_err(err)?;
        ensure(spec.num_layers() == layers && spec.hidden_size() == hidden, || {
            format!("{name}: ({}, {}) instead of ({layers}, {hidden})", spec.num_layers(), spec.hidden_size())
        })?;
        if let Some(total) = of {
            ensure(spec.checkpoint_layers() == total, || format!("{name}: pruned from {}", spec.checkpoint_layers()))?;
        }
        seen.push(format!("{name} ({layers}, {hidden})"));
    }
    let guide = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).map_err(err)?;
    for (name, ..) in expected {
        ensure(guide.contains(name), || format!("README does not document preset {name}"))?;
    }
    Ok(seen.join(", "))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;
    let mut report = |n: u32, title: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("PASS criterion {n:>2} ({title}): {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL criterion {n:>2} ({title}): {why}");
            }
        }
    };

    if wanted(1) {
        report(1, "CCC oracle", criterion_1());
    }
    if wanted(2) {
        report(2, "WER oracle", criterion_2());
    }
    if wanted(3) {
        report(3, "gradient check", criterion_3());
    }
    if [4, 6, 9].into_iter().any(wanted) {
        match modality_runs() {
            Ok(runs) => {
                if wanted(4) {
                    report(4, "modality separation", criterion_4(&runs));
                }
                if wanted(6) {
                    report(6, "FT=>FRZ ordering", criterion_6(&runs));
                }
                if wanted(9) {
                    report(9, "determinism", criterion_9(&runs));
                }
            }
            Err(why) => {
                for (n, title) in [(4, "modality separation"), (6, "FT=>FRZ ordering"), (9, "determinism")] {
                    if wanted(n) {
                        report(n, title, Err(format!("training failed: {why}")));
                    }
                }
            }
        }
    }
    if wanted(5) {
        report(5, "probe recovery", criterion_5());
    }
    if wanted(7) {
        report(7, "bucketing", criterion_7());
    }
    if wanted(8) {
        report(8, "transcript robustness", criterion_8());
    }
    if wanted(10) {
        report(10, "preset dimensions", criterion_10());
    }

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
