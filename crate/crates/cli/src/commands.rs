use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use ser_core::corpus::{generate_synthetic_corpus, load_manifest, partition_records, save_manifest, UtteranceRecord};
use ser_core::metrics::CccReport;
use ser_core::{Dimension, EmotionTriple, Partition};
use ser_model::asr::{
    transcribe_corpus, CommandTranscriber, Distortion, LookupTranscriber, Transcriber,
};
use ser_model::encoders::{load_encoder, preset, EncoderSpec, FreezePolicy};
use ser_model::model::{SerModel, SerModelConfig};
use ser_model::probe::{export_profile, fit_probe, ProbeProfile};
use ser_model::trainer::{evaluate, train_ft_frz, ConstantStub, PerfectStub, Predictor, Regime, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::report::{compose_report, write_eval};
use crate::run::{OutputLock, RunManifest, RunSummary};
use crate::{
    AsrStubArg, CorpusArgs, DimensionArg, EvalArgs, ProbeArgs, ReportArgs, StubArg, SynthArgs, TrainArgs,
    TranscribeArgs,
};

pub const MODEL_FILE: &str = "model.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn load_corpus(manifest: &Path) -> CliResult<Vec<UtteranceRecord>> {
    require_file(manifest, "manifest")?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let corpus = load_manifest(manifest, root)?;
    if corpus.is_empty() {
        return Err(CliError::Data(format!("{} lists no utterances", manifest.display())));
    }
    Ok(corpus)
}

pub fn load_config(path: Option<&Path>, seed: u64) -> CliResult<TrainConfig> {
    let mut config = match path {
        Some(p) => {
            require_file(p, "config")?;
            TrainConfig::from_file(p)?
        }
        None => TrainConfig::default(),
    };
    config.seed = seed;
    Ok(config)
}

fn encoder_spec(name: &str, seed: u64) -> CliResult<EncoderSpec> {
    preset(name, seed).map_err(|e| CliError::Usage(e.to_string()))
}

fn default_text_encoder(audio: &str) -> &'static str {
    if audio.starts_with("tiny-") {
        "tiny-text-2x32"
    } else {
        "tinybert-4l"
    }
}

fn start(command: &str, corpus: &CorpusArgs, arguments: Vec<String>) -> CliResult<(OutputLock, RunManifest)> {
    let lock = OutputLock::acquire(&corpus.out)?;
    let manifest = RunManifest::begin(command, arguments, corpus.config.clone(), corpus.seed, &corpus.out);
    Ok((lock, manifest))
}

fn splits(only: Option<crate::SplitArg>) -> Vec<Partition> {
    match only {
        Some(s) => vec![s.into()],
        None => vec![Partition::Development, Partition::Test1, Partition::Test2],
    }
}

fn eval_markdown(report: &CccReport) -> String {
    let [a, v, d] = report.scores();
    format!(
        "| Split | Arousal | Valence | Dominance |\n|---|---|---|---|\n| {} | {a:.3} | {v:.3} | {d:.3} |\n",
        report.partition.name()
    )
}

/// Scores `predictor` on each nonempty split and writes `eval_<split>.json`
/// and `.md`.
fn evaluate_splits(predictor: &dyn Predictor, corpus: &[UtteranceRecord], partitions: &[Partition], out: &Path) -> CliResult<Vec<CccReport>> {
    let mut reports = Vec::new();
    for &p in partitions {
        if partition_records(corpus, p).len() < 2 {
            log::warn!("skipping {}: fewer than two utterances", p.name());
            continue;
        }
        let report = evaluate(predictor, corpus, p)?;
        write_eval(out, &report)?;
        fs::write(out.join(format!("eval_{}.md", p.name())), eval_markdown(&report))?;
        println!("{}", eval_markdown(&report).lines().last().unwrap_or_default());
        reports.push(report);
    }
    Ok(reports)
}

fn summary_of(model: &SerModel, regime: Regime) -> RunSummary {
    RunSummary {
        regime: regime.name().to_owned(),
        audio_encoder: model.audio_encoder().spec().name.clone(),
        text_encoder: model.text_encoder().map(|t| t.spec().name.clone()),
        parameters: model.parameter_count(),
        trainable_parameters: model.trainable_parameter_count(),
    }
}

pub fn train(args: &TrainArgs, arguments: Vec<String>) -> CliResult<()> {
    let c = &args.corpus;
    let config = load_config(c.config.as_deref(), c.seed)?;
    let regime: Regime = args.regime.into();
    let audio = encoder_spec(&args.encoder, c.seed)?;
    let text_name = args.text_encoder.clone().unwrap_or_else(|| default_text_encoder(&args.encoder).to_owned());
    let text = encoder_spec(&text_name, c.seed.wrapping_add(1))?;
    let corpus = load_corpus(&c.manifest)?;
    let (_lock, mut manifest) = start("train", c, arguments)?;

    if regime == Regime::Probe {
        manifest.summary = Some(run_probes(&audio, &corpus, DimensionArg::All, &config, &c.out)?);
        return manifest.finish(&c.out);
    }

    let mut model_config = match regime {
        Regime::AudiotextFt => SerModelConfig::audio_text(audio, text.clone()),
        _ => SerModelConfig::audio_only(audio),
    };
    model_config.head_seed = c.seed;
    let model = SerModel::new(model_config)?;
    let (model, log) = match regime {
        Regime::FtFrz => train_ft_frz(model, load_encoder(&text)?, &corpus, &config)?,
        _ => ser_model::trainer::train(model, &corpus, regime, &config)?,
    };
    log.write(&c.out.join(TRAIN_LOG))?;
    model.save(&c.out.join(MODEL_FILE))?;
    for stage in &log.stages {
        println!(
            "{}: {} epochs, best epoch {}{}",
            stage.stage,
            stage.epochs.len(),
            stage.best_epoch,
            if stage.stopped_early { " (stopped early)" } else { "" }
        );
    }
    evaluate_splits(&model, &corpus, &splits(args.split), &c.out)?;
    manifest.summary = Some(summary_of(&model, regime));
    manifest.finish(&c.out)
}

pub fn eval(args: &EvalArgs, arguments: Vec<String>) -> CliResult<()> {
    let c = &args.corpus;
    let corpus = load_corpus(&c.manifest)?;
    let (_lock, mut manifest) = start("eval", c, arguments)?;
    let partition: Partition = args.split.into();
    match (&args.model, args.stub) {
        (Some(path), _) => {
            require_file(path, "model")?;
            let model = SerModel::load(path)?;
            evaluate_splits(&model, &corpus, &[partition], &c.out)?;
            let regime = model.config().text.as_ref().map_or(Regime::AudioFt, |_| Regime::AudiotextFt);
            manifest.summary = Some(summary_of(&model, regime));
        }
        (None, Some(StubArg::Perfect)) => {
            evaluate_splits(&PerfectStub, &corpus, &[partition], &c.out)?;
        }
        (None, Some(StubArg::Constant)) => {
            evaluate_splits(&ConstantStub(EmotionTriple::new(0.5, 0.5, 0.5)), &corpus, &[partition], &c.out)?;
        }
        (None, None) => return Err(CliError::Usage("give --model or --stub".into())),
    }
    manifest.finish(&c.out)
}

#[derive(Serialize)]
struct ProbeRecord<'a> {
    encoder: &'a str,
    profile: &'a ProbeProfile,
    dev_ccc: f64,
    best_epoch: usize,
}

fn run_probes(spec: &EncoderSpec, corpus: &[UtteranceRecord], which: DimensionArg, config: &TrainConfig, out: &Path) -> CliResult<RunSummary> {
    let encoder = load_encoder(spec)?.apply_freeze(FreezePolicy::ALL);
    let dims: Vec<Dimension> = match which {
        DimensionArg::Arousal => vec![Dimension::Arousal],
        DimensionArg::Valence => vec![Dimension::Valence],
        DimensionArg::Dominance => vec![Dimension::Dominance],
        DimensionArg::All => Dimension::ALL.to_vec(),
    };
    let mut records = BTreeMap::new();
    for dim in dims {
        let fit = fit_probe(&encoder, corpus, dim, config)?;
        export_profile(&fit.profile, out)?;
        println!(
            "{}: peak at layer {} (weight {:.3}), dev CCC {:.3}",
            dim.name(),
            fit.profile.argmax(),
            fit.profile.weights[fit.profile.argmax()],
            fit.dev_ccc
        );
        let record = serde_json::to_value(ProbeRecord {
            encoder: &spec.name,
            profile: &fit.profile,
            dev_ccc: fit.dev_ccc,
            best_epoch: fit.log.best_epoch,
        })?;
        records.insert(dim.name(), record);
    }
    fs::write(out.join("probe.json"), serde_json::to_string_pretty(&records)? + "\n")?;
    Ok(RunSummary {
        regime: Regime::Probe.name().to_owned(),
        audio_encoder: spec.name.clone(),
        text_encoder: None,
        parameters: encoder.parameter_count(),
        trainable_parameters: 0,
    })
}

pub fn probe(args: &ProbeArgs, arguments: Vec<String>) -> CliResult<()> {
    let c = &args.corpus;
    let config = load_config(c.config.as_deref(), c.seed)?;
    let spec = encoder_spec(&args.encoder, c.seed)?;
    let corpus = load_corpus(&c.manifest)?;
    let (_lock, mut manifest) = start("probe", c, arguments)?;
    manifest.summary = Some(run_probes(&spec, &corpus, args.dimension, &config, &c.out)?);
    manifest.finish(&c.out)
}

#[derive(Serialize)]
struct WerSummary {
    system: String,
    split: String,
    wer: f64,
    substitutions: usize,
    deletions: usize,
    insertions: usize,
    reference_words: usize,
    failures: usize,
}

pub fn transcribe(args: &TranscribeArgs, arguments: Vec<String>) -> CliResult<()> {
    let c = &args.corpus;
    let corpus = load_corpus(&c.manifest)?;
    let transcriber: Box<dyn Transcriber> = match (&args.asr_command, args.stub) {
        (Some(program), _) => Box::new(CommandTranscriber::new(
            args.system.clone().unwrap_or_else(|| program.display().to_string()),
            program.clone(),
            args.asr_args.clone(),
        )),
        (None, Some(stub)) => {
            let distortion = match stub {
                AsrStubArg::Identity => Distortion::Identity,
                AsrStubArg::DropEverySecondWord => Distortion::DropEverySecondWord,
                AsrStubArg::ShuffleFillers => Distortion::ShuffleFillers { seed: c.seed },
            };
            Box::new(LookupTranscriber::new(&corpus, distortion))
        }
        (None, None) => return Err(CliError::Usage("give --asr-command or --stub".into())),
    };
    let (_lock, manifest) = start("transcribe", c, arguments)?;
    let result = transcribe_corpus(&corpus, transcriber.as_ref())?;
    result.write_hypotheses(&c.out.join("hypotheses.csv"))?;
    save_manifest(&result.records, &c.out.join("manifest.csv"), &c.out)?;

    let mut summaries = Vec::new();
    let scopes: Vec<Option<Partition>> = match args.split {
        Some(s) => vec![Some(s.into())],
        None => vec![None, Some(Partition::Test1), Some(Partition::Test2)],
    };
    for scope in scopes {
        if scope.is_some_and(|p| partition_records(&result.records, p).is_empty()) {
            continue;
        }
        let w = result.wer(scope)?;
        let split = scope.map_or("all".to_owned(), |p| p.name().to_owned());
        println!("WER {split}: {:.1}% ({} words)", 100.0 * w.wer, w.reference_words);
        summaries.push(WerSummary {
            system: result.system.clone(),
            split,
            wer: w.wer,
            substitutions: w.substitutions,
            deletions: w.deletions,
            insertions: w.insertions,
            reference_words: w.reference_words,
            failures: result.failures(),
        });
    }
    fs::write(c.out.join("wer.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
    manifest.finish(&c.out)
}

pub fn report(args: &ReportArgs, arguments: Vec<String>) -> CliResult<()> {
    let _lock = OutputLock::acquire(&args.out)?;
    let manifest = RunManifest::begin("report", arguments, None, 0, &args.out);
    let output = compose_report(&args.runs, &args.out)?;
    for m in &output.missing {
        eprintln!("{m}");
    }
    println!("wrote {}", args.out.join("report.md").display());
    manifest.finish(&args.out)
}

pub fn synth(args: &SynthArgs, arguments: Vec<String>) -> CliResult<()> {
    let _lock = OutputLock::acquire(&args.out)?;
    let manifest = RunManifest::begin("synth", arguments, None, args.seed, &args.out);
    let corpus = generate_synthetic_corpus(args.n, args.seed, args.sample_rate)?;
    let path: PathBuf = args.out.join("manifest.csv");
    save_manifest(&corpus, &path, &args.out)?;
    println!("wrote {} utterances to {}", corpus.len(), path.display());
    manifest.finish(&args.out)
}
