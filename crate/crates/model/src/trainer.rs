//! Fine-tuning with the CCC objective, early stopping and the training
//! regimes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};
use ser_core::corpus::{partition_records, plan_buckets, UtteranceRecord};
use ser_core::metrics::CccReport;
use ser_core::{Dimension, EmotionTriple, Partition};

use crate::encoders::{Encoder, FreezePolicy};
use crate::error::{Error, Result};
use crate::loss::ccc_loss;
use crate::model::SerModel;
use crate::params::{fnv1a, ForwardCtx};

/// Hyperparameters; every field has a default so config files may be
/// partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 16,
            dropout: 0.1,
            patience: 5,
            max_epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.grad_clip < 0.0 || self.eval_batch_size == 0 {
            return bad("grad_clip must be >= 0 and eval_batch_size >= 1".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Audio-only fine-tuning, convolutional frontend frozen.
    AudioFt,
    /// Audio-textual fine-tuning, both frontends frozen.
    AudiotextFt,
    /// Audio fine-tuning, then a fresh fused head over both frozen encoders.
    FtFrz,
    /// Frozen encoder, trained layer weights and head.
    Probe,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::AudioFt, Regime::AudiotextFt, Regime::FtFrz, Regime::Probe];

    pub fn name(self) -> &'static str {
        match self {
            Regime::AudioFt => "audio_ft",
            Regime::AudiotextFt => "audiotext_ft",
            Regime::FtFrz => "ft_frz",
            Regime::Probe => "probe",
        }
    }

    /// Freeze policies `(audio, text)` applied before the first step (for
    /// `FtFrz`, those of the second stage).
    pub fn freeze(self) -> (FreezePolicy, FreezePolicy) {
        match self {
            Regime::AudioFt | Regime::AudiotextFt => (FreezePolicy::FRONTEND, FreezePolicy::FRONTEND),
            Regime::FtFrz | Regime::Probe => (FreezePolicy::ALL, FreezePolicy::ALL),
        }
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Regime::AudiotextFt | Regime::FtFrz)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown regime `{s}` (audio_ft, audiotext_ft, ft_frz, probe)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_ccc: BTreeMap<Dimension, f64>,
    pub dev_mean_ccc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based, as in `EpochRecord::epoch`).
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub trainable_params: usize,
}

impl StageLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// Per-epoch history of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub regime: Regime,
    pub stages: Vec<StageLog>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Run { regime: Regime },
    Epoch(EpochRecord),
    Stage {
        stage: String,
        best_epoch: usize,
        stopped_early: bool,
        trainable_params: usize,
    },
}

impl TrainLog {
    /// Last stage, whose parameters the returned model holds.
    pub fn final_stage(&self) -> Option<&StageLog> {
        self.stages.last()
    }

    pub fn best_epoch(&self) -> usize {
        self.final_stage().map_or(0, |s| s.best_epoch)
    }

    pub fn stopped_early(&self) -> bool {
        self.final_stage().is_some_and(|s| s.stopped_early)
    }

    /// One JSON object per line: a run header, every epoch, then one
    /// summary per stage.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&LogLine::Run { regime: self.regime })?;
        out.push('\n');
        for stage in &self.stages {
            for e in &stage.epochs {
                out.push_str(&serde_json::to_string(&LogLine::Epoch(e.clone()))?);
                out.push('\n');
            }
            out.push_str(&serde_json::to_string(&LogLine::Stage {
                stage: stage.stage.clone(),
                best_epoch: stage.best_epoch,
                stopped_early: stage.stopped_early,
                trainable_params: stage.trainable_params,
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut regime = None;
        let mut stages = Vec::new();
        let mut pending = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<LogLine>(line)? {
                LogLine::Run { regime: r } => regime = Some(r),
                LogLine::Epoch(e) => pending.push(e),
                LogLine::Stage { stage, best_epoch, stopped_early, trainable_params } => stages.push(StageLog {
                    stage,
                    epochs: std::mem::take(&mut pending),
                    best_epoch,
                    stopped_early,
                    trainable_params,
                }),
            }
        }
        let regime = regime.ok_or_else(|| Error::invalid("train log lacks a run header"))?;
        Ok(Self { regime, stages })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_jsonl()?)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

/// Anything that maps utterances to emotion estimates.
pub trait Predictor {
    fn predict(&self, records: &[&UtteranceRecord]) -> Result<Vec<EmotionTriple>>;
}

impl Predictor for SerModel {
    fn predict(&self, records: &[&UtteranceRecord]) -> Result<Vec<EmotionTriple>> {
        self.predict_batched(records, 32)
    }
}

/// Returns the gold labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectStub;

impl Predictor for PerfectStub {
    fn predict(&self, records: &[&UtteranceRecord]) -> Result<Vec<EmotionTriple>> {
        Ok(records.iter().map(|r| r.labels).collect())
    }
}

/// Returns the same estimate for every utterance.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantStub(pub EmotionTriple);

impl Predictor for ConstantStub {
    fn predict(&self, records: &[&UtteranceRecord]) -> Result<Vec<EmotionTriple>> {
        Ok(vec![self.0; records.len()])
    }
}

/// Scores predictions over the whole partition at once.
pub fn evaluate(predictor: &dyn Predictor, corpus: &[UtteranceRecord], partition: Partition) -> Result<CccReport> {
    if partition == Partition::Train {
        return Err(Error::invalid("evaluation runs on development, test1 or test2"));
    }
    let records = partition_records(corpus, partition);
    if records.is_empty() {
        return Err(Error::invalid(format!("partition {} is empty", partition.name())));
    }
    let estimates = predictor.predict(&records)?;
    let targets: Vec<EmotionTriple> = records.iter().map(|r| r.labels).collect();
    Ok(CccReport::from_predictions(partition, &targets, &estimates)?)
}

/// Dev-set score used for model selection.
pub(crate) struct DevScore {
    pub per_dimension: BTreeMap<Dimension, f64>,
    pub mean: f64,
}

impl DevScore {
    pub(crate) fn from_report(report: &CccReport) -> Self {
        Self { per_dimension: report.per_dimension.clone(), mean: report.mean_ccc }
    }
}

/// What a stage optimizes; implemented for full models, cached-feature
/// heads and probes.
pub(crate) trait StageTask {
    /// Trainable variables in a fixed order.
    fn vars(&self) -> Vec<(String, Var)>;
    /// `(prediction, target)` for a training batch.
    fn forward(&self, batch: &[&UtteranceRecord], ctx: &ForwardCtx) -> Result<(Tensor, Tensor)>;
    fn dev_score(&self) -> Result<DevScore>;
    fn snapshot(&self) -> Result<BTreeMap<String, Tensor>>;
    fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()>;
    /// Called after every optimizer step.
    fn after_step(&self) -> Result<()> {
        Ok(())
    }
}

pub(crate) fn stage_seed(seed: u64, stage: &str, epoch: usize, batch: usize) -> u64 {
    let bytes = stage.bytes().chain(epoch.to_le_bytes()).chain(batch.to_le_bytes());
    fnv1a(bytes, seed)
}

fn clip_gradients(grads: &mut candle_core::backprop::GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    if max_norm <= 0.0 {
        return Ok(());
    }
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(())
}

fn batch_statistics(pred: &Tensor, target: &Tensor) -> String {
    let describe = |t: &Tensor| -> String {
        let Ok(rows) = t.to_dtype(DType::F64).and_then(|t| t.to_vec2::<f64>()) else {
            return "unavailable".into();
        };
        let cols = rows.first().map_or(0, Vec::len);
        (0..cols)
            .map(|c| {
                let v: Vec<f64> = rows.iter().map(|r| r[c]).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
                format!("dim{c}: mean {mean:.6} var {var:.6}")
            })
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!("estimates [{}]; targets [{}]", describe(pred), describe(target))
}

/// Epoch loop shared by every regime: bucketed batches, per-batch CCC loss,
/// Adam, clipping, dev-based early stopping and best-epoch restoration.
pub(crate) fn run_stage(
    stage: &str,
    task: &dyn StageTask,
    train: &[&UtteranceRecord],
    config: &TrainConfig,
) -> Result<StageLog> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid("training partition needs at least 2 items"));
    }
    let named = task.vars();
    let vars: Vec<Var> = named.iter().map(|(_, v)| v.clone()).collect();
    let trainable_params = vars.iter().map(|v| v.elem_count()).sum();
    let params = ParamsAdamW {
        lr: config.learning_rate,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.epsilon,
        weight_decay: 0.0,
    };
    let mut optimizer = AdamW::new(vars.clone(), params)?;
    let by_id: HashMap<&str, &UtteranceRecord> = train.iter().map(|r| (r.id.as_str(), *r)).collect();

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let plan = plan_buckets(train, config.batch_size, stage_seed(config.seed, stage, epoch, 0))?;
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for (b, ids) in plan.batches.iter().enumerate() {
            if ids.len() < 2 {
                continue;
            }
            let batch: Vec<&UtteranceRecord> = ids.iter().map(|id| by_id[id.as_str()]).collect();
            let ctx = ForwardCtx::train(config.dropout, stage_seed(config.seed, stage, epoch, b + 1));
            let (pred, target) = task.forward(&batch, &ctx)?;
            let loss = ccc_loss(&pred, &target)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: b,
                    diagnostics: format!("{stage} epoch {epoch}: {}", batch_statistics(&pred, &target)),
                });
            }
            if !vars.is_empty() {
                let mut grads = loss.backward()?;
                clip_gradients(&mut grads, &vars, config.grad_clip)?;
                optimizer.step(&grads)?;
                task.after_step()?;
            }
            loss_sum += value;
            steps += 1;
        }
        let dev = task.dev_score()?;
        epochs.push(EpochRecord {
            stage: stage.to_owned(),
            epoch,
            train_loss: if steps == 0 { f64::NAN } else { loss_sum / steps as f64 },
            dev_ccc: dev.per_dimension,
            dev_mean_ccc: dev.mean,
        });
        let improved = best.as_ref().is_none_or(|(score, _, _)| dev.mean > *score);
        if improved {
            best = Some((dev.mean, epoch, task.snapshot()?));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience && epoch < config.max_epochs {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, best_epoch, snapshot) = best.ok_or_else(|| Error::invalid("no epoch was run"))?;
    task.restore(&snapshot)?;
    Ok(StageLog { stage: stage.to_owned(), epochs, best_epoch, stopped_early, trainable_params })
}

pub(crate) fn targets(records: &[&UtteranceRecord], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let rows: Vec<f64> = records.iter().flat_map(|r| r.labels.to_array()).collect();
    Ok(Tensor::from_vec(rows, (records.len(), 3), device)?.to_dtype(dtype)?)
}

struct ModelTask<'a> {
    model: &'a SerModel,
    dev: Vec<&'a UtteranceRecord>,
    eval_batch: usize,
}

impl StageTask for ModelTask<'_> {
    fn vars(&self) -> Vec<(String, Var)> {
        self.model.trainable_vars()
    }

    fn forward(&self, batch: &[&UtteranceRecord], ctx: &ForwardCtx) -> Result<(Tensor, Tensor)> {
        let pred = self.model.forward(&self.model.batch(batch)?, ctx)?;
        let target = targets(batch, pred.dtype(), pred.device())?;
        Ok((pred, target))
    }

    fn dev_score(&self) -> Result<DevScore> {
        let estimates = self.model.predict_batched(&self.dev, self.eval_batch)?;
        let gold: Vec<EmotionTriple> = self.dev.iter().map(|r| r.labels).collect();
        Ok(DevScore::from_report(&CccReport::from_predictions(Partition::Development, &gold, &estimates)?))
    }

    fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.model.snapshot()
    }

    fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        self.model.restore(snapshot)
    }
}

/// Head trained on precomputed features of frozen encoders.
struct FrozenHeadTask<'a> {
    model: &'a SerModel,
    features: HashMap<&'a str, Tensor>,
    dev: Vec<&'a UtteranceRecord>,
}

impl FrozenHeadTask<'_> {
    fn stack(&self, records: &[&UtteranceRecord]) -> Result<Tensor> {
        let rows: Vec<&Tensor> = records
            .iter()
            .map(|r| self.features.get(r.id.as_str()).ok_or_else(|| Error::invalid(format!("no features for {}", r.id))))
            .collect::<Result<_>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }
}

impl StageTask for FrozenHeadTask<'_> {
    fn vars(&self) -> Vec<(String, Var)> {
        self.model.trainable_vars()
    }

    fn forward(&self, batch: &[&UtteranceRecord], ctx: &ForwardCtx) -> Result<(Tensor, Tensor)> {
        let pred = self.model.head().forward(&self.stack(batch)?, ctx)?;
        let target = targets(batch, pred.dtype(), pred.device())?;
        Ok((pred, target))
    }

    fn dev_score(&self) -> Result<DevScore> {
        let pred = self.model.head().forward(&self.stack(&self.dev)?, &ForwardCtx::eval())?;
        let rows = pred.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let estimates: Vec<EmotionTriple> = rows.iter().map(|r| EmotionTriple::new(r[0], r[1], r[2])).collect();
        let gold: Vec<EmotionTriple> = self.dev.iter().map(|r| r.labels).collect();
        Ok(DevScore::from_report(&CccReport::from_predictions(Partition::Development, &gold, &estimates)?))
    }

    fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.model.snapshot()
    }

    fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        self.model.restore(snapshot)
    }
}

fn split(corpus: &[UtteranceRecord]) -> Result<(Vec<&UtteranceRecord>, Vec<&UtteranceRecord>)> {
    let train = partition_records(corpus, Partition::Train);
    let dev = partition_records(corpus, Partition::Development);
    if dev.len() < 2 {
        return Err(Error::invalid("development partition needs at least 2 items"));
    }
    Ok((train, dev))
}

/// Fine-tunes `model` under `regime` (`AudioFt` or `AudiotextFt`) and
/// returns it holding the best-dev parameters.
pub fn train(mut model: SerModel, corpus: &[UtteranceRecord], regime: Regime, config: &TrainConfig) -> Result<(SerModel, TrainLog)> {
    match regime {
        Regime::AudioFt if model.is_audio_text() => {
            return Err(Error::invalid("audio_ft needs an audio-only model"));
        }
        Regime::AudiotextFt if !model.is_audio_text() => {
            return Err(Error::invalid("audiotext_ft needs a model with a text encoder"));
        }
        Regime::FtFrz => return Err(Error::invalid("ft_frz runs through train_ft_frz")),
        Regime::Probe => return Err(Error::invalid("probe runs through fit_probe")),
        _ => {}
    }
    config.validate()?;
    let (audio_policy, text_policy) = regime.freeze();
    model.set_freeze(audio_policy, text_policy);
    let (train_set, dev) = split(corpus)?;
    let task = ModelTask { model: &model, dev, eval_batch: config.eval_batch_size };
    let stage = run_stage(regime.name(), &task, &train_set, config)?;
    Ok((model, TrainLog { regime, stages: vec![stage] }))
}

/// Stage 1 fine-tunes `audio_model` alone; stage 2 freezes it and
/// `text_encoder` entirely and trains a fresh fused head.
pub fn train_ft_frz(
    audio_model: SerModel,
    text_encoder: Encoder,
    corpus: &[UtteranceRecord],
    config: &TrainConfig,
) -> Result<(SerModel, TrainLog)> {
    let (tuned, first) = train(audio_model, corpus, Regime::AudioFt, config)?;
    let (fused, second) = train_frozen_head(tuned, text_encoder, corpus, config)?;
    let mut stages = first.stages;
    stages.extend(second.stages);
    Ok((fused, TrainLog { regime: Regime::FtFrz, stages }))
}

/// Second stage of [`train_ft_frz`] on an already fine-tuned audio model.
pub fn train_frozen_head(
    tuned_audio: SerModel,
    text_encoder: Encoder,
    corpus: &[UtteranceRecord],
    config: &TrainConfig,
) -> Result<(SerModel, TrainLog)> {
    config.validate()?;
    if tuned_audio.is_audio_text() {
        return Err(Error::invalid("stage 2 starts from an audio-only model"));
    }
    let mut model_config = tuned_audio.config().clone();
    model_config.head_seed = stage_seed(config.seed, "ft_frz.head", 0, 0);
    let (audio, _) = tuned_audio.into_encoders();
    let mut fused = SerModel::from_parts(model_config, audio, Some(text_encoder))?;
    fused.set_freeze(FreezePolicy::ALL, FreezePolicy::ALL);

    let (train_set, dev) = split(corpus)?;
    let all: Vec<&UtteranceRecord> = train_set.iter().chain(&dev).copied().collect();
    let matrix = fused.features(&all, config.eval_batch_size)?;
    let features = all
        .iter()
        .enumerate()
        .map(|(i, r)| Ok((r.id.as_str(), matrix.get(i)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    let stage = {
        let task = FrozenHeadTask { model: &fused, features, dev };
        run_stage("ft_frz", &task, &train_set, config)?
    };
    Ok((fused, TrainLog { regime: Regime::FtFrz, stages: vec![stage] }))
}
