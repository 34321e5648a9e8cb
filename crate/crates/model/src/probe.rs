//! Layer-importance probe: softmax-normalized weights over the hidden states
//! of a frozen encoder, trained with a single-output head per dimension.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};
use ser_core::corpus::{partition_records, UtteranceRecord};
use ser_core::{Dimension, Partition};

use crate::encoders::{Encoder, EncoderOutput, Modality};
use crate::error::{Error, Result};
use crate::model::{pool, Head, HeadConfig, PoolingMode};
use crate::nn::softmax_last;
use crate::params::{ForwardCtx, ParamBuilder, ParamSource, ParamStore};
use crate::trainer::{run_stage, stage_seed, DevScore, StageLog, StageTask, TrainConfig};

/// Tolerance on the sum of the weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// Importance of each hidden state (index 0 is the frontend output) for one
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeProfile {
    pub dimension: Dimension,
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ProbeProfile {
    pub fn from_logits(dimension: Dimension, logits: Vec<f64>) -> Result<Self> {
        let weights = ser_core::layers::layer_weights(&logits)?;
        Ok(Self { dimension, weights, logits })
    }

    /// Zero logits over `num_states` states, i.e. uniform weights.
    pub fn uniform(dimension: Dimension, num_states: usize) -> Result<Self> {
        Self::from_logits(dimension, vec![0.0; num_states])
    }

    pub fn num_states(&self) -> usize {
        self.weights.len()
    }

    pub fn argmax(&self) -> usize {
        ser_core::layers::argmax(&self.weights).unwrap_or(0)
    }

    /// Fails unless the weights are nonnegative and sum to one.
    pub fn check_normalized(&self) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Contract(format!("probe weights sum to {total}")));
        }
        Ok(())
    }
}

/// `(L + 1, frames, d)` states of a single utterance.
fn item_states(outputs: &EncoderOutput, item: usize) -> Result<Tensor> {
    let valid = outputs.valid_lengths[item];
    let layers = outputs
        .layer_states
        .iter()
        .map(|s| Ok(s.get(item)?.narrow(0, 0, valid)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&layers, 0)?)
}

/// Weighted sum of `(L + 1, frames, d)` states, pooled to `(1, size)`.
fn mix_and_pool(states: &Tensor, weights: &Tensor, pooling: PoolingMode) -> Result<Tensor> {
    let (n, frames, d) = states.dims3()?;
    let mixed = weights
        .reshape((1, n))?
        .matmul(&states.reshape((n, frames * d))?)?
        .reshape((1, frames, d))?;
    pool(&mixed, &[frames], pooling)
}

/// Estimates for the probed dimension, one per utterance in `outputs`.
pub fn probe_forward(outputs: &EncoderOutput, profile: &ProbeProfile, head: &Head, pooling: PoolingMode) -> Result<Vec<f64>> {
    let states = outputs.layer_states.len();
    if profile.num_states() != states {
        return Err(Error::invalid(format!(
            "profile has {} weights for {states} hidden states",
            profile.num_states()
        )));
    }
    if head.config().output_size != 1 {
        return Err(Error::invalid("probe head must have a single output"));
    }
    let first = outputs.last()?;
    let weights = Tensor::new(profile.weights.as_slice(), first.device())?.to_dtype(first.dtype())?;
    let rows = (0..outputs.valid_lengths.len())
        .map(|i| mix_and_pool(&item_states(outputs, i)?, &weights, pooling))
        .collect::<Result<Vec<_>>>()?;
    let pred = head.forward(&Tensor::cat(&rows, 0)?, &ForwardCtx::eval())?;
    Ok(pred.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Result of [`fit_probe`].
#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub profile: ProbeProfile,
    /// Development CCC of the probed dimension at the kept epoch.
    pub dev_ccc: f64,
    pub log: StageLog,
}

struct ProbeTask<'a> {
    dimension: Dimension,
    logits: Var,
    head_params: ParamStore,
    head: Head,
    pooling: PoolingMode,
    states: HashMap<&'a str, Tensor>,
    dev: Vec<&'a UtteranceRecord>,
    on_step: RefCell<&'a mut dyn FnMut(&ProbeProfile)>,
}

impl ProbeTask<'_> {
    fn weights(&self) -> Result<Tensor> {
        softmax_last(self.logits.as_tensor())
    }

    fn profile(&self) -> Result<ProbeProfile> {
        let logits = self.logits.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
        ProbeProfile::from_logits(self.dimension, logits)
    }

    fn predict(&self, records: &[&UtteranceRecord], ctx: &ForwardCtx) -> Result<Tensor> {
        let weights = self.weights()?;
        let rows = records
            .iter()
            .map(|r| {
                let states = self
                    .states
                    .get(r.id.as_str())
                    .ok_or_else(|| Error::invalid(format!("no cached states for {}", r.id)))?;
                mix_and_pool(states, &weights, self.pooling)
            })
            .collect::<Result<Vec<_>>>()?;
        self.head.forward(&Tensor::cat(&rows, 0)?, ctx)
    }

    fn target(&self, records: &[&UtteranceRecord], like: &Tensor) -> Result<Tensor> {
        let values: Vec<f64> = records.iter().map(|r| r.labels.get(self.dimension)).collect();
        Ok(Tensor::from_vec(values, (records.len(), 1), like.device())?.to_dtype(like.dtype())?)
    }
}

impl StageTask for ProbeTask<'_> {
    fn vars(&self) -> Vec<(String, Var)> {
        let mut vars = vec![("logits".to_owned(), self.logits.clone())];
        vars.extend(self.head_params.vars_where(|_| true));
        vars
    }

    fn forward(&self, batch: &[&UtteranceRecord], ctx: &ForwardCtx) -> Result<(Tensor, Tensor)> {
        let pred = self.predict(batch, ctx)?;
        let target = self.target(batch, &pred)?;
        Ok((pred, target))
    }

    fn dev_score(&self) -> Result<DevScore> {
        let pred = self.predict(&self.dev, &ForwardCtx::eval())?;
        let estimates = pred.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let gold: Vec<f64> = self.dev.iter().map(|r| r.labels.get(self.dimension)).collect();
        let score = ser_core::metrics::ccc(&gold, &estimates)?;
        Ok(DevScore { per_dimension: BTreeMap::from([(self.dimension, score)]), mean: score })
    }

    fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut snap = self.head_params.snapshot()?;
        snap.insert("\u{0}logits".to_owned(), self.logits.as_tensor().copy()?);
        Ok(snap)
    }

    fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        self.head_params.restore(snapshot)?;
        if let Some(logits) = snapshot.get("\u{0}logits") {
            self.logits.set(logits)?;
        }
        Ok(())
    }

    fn after_step(&self) -> Result<()> {
        let profile = self.profile()?;
        profile.check_normalized()?;
        (self.on_step.borrow_mut())(&profile);
        Ok(())
    }
}

/// Trains layer logits and a single-output head on the train partition of
/// `corpus` for `dimension`; the encoder must be fully frozen.
pub fn fit_probe(encoder: &Encoder, corpus: &[UtteranceRecord], dimension: Dimension, config: &TrainConfig) -> Result<ProbeFit> {
    fit_probe_observed(encoder, corpus, dimension, config, PoolingMode::default(), &mut |_| {})
}

/// [`fit_probe`] with an explicit pooling mode and a callback receiving the
/// profile after every optimizer step.
pub fn fit_probe_observed(
    encoder: &Encoder,
    corpus: &[UtteranceRecord],
    dimension: Dimension,
    config: &TrainConfig,
    pooling: PoolingMode,
    on_step: &mut dyn FnMut(&ProbeProfile),
) -> Result<ProbeFit> {
    if !encoder.freeze_policy().freeze_all {
        return Err(Error::Contract(format!(
            "probing needs a fully frozen encoder; {} is trainable",
            encoder.spec().name
        )));
    }
    if encoder.modality() != Modality::Audio {
        return Err(Error::invalid("only audio encoders are probed"));
    }
    config.validate()?;
    let train = partition_records(corpus, Partition::Train);
    let dev = partition_records(corpus, Partition::Development);
    if dev.len() < 2 {
        return Err(Error::invalid("development partition needs at least 2 items"));
    }
    let all: Vec<&UtteranceRecord> = train.iter().chain(&dev).copied().collect();
    let states = cache_states(encoder, &all, config.eval_batch_size)?;

    let stage = format!("probe.{}", dimension.name());
    let source = ParamSource::Random { seed: stage_seed(config.seed, &stage, 0, 0) };
    let store = RefCell::new(ParamStore::new(encoder.dtype(), encoder.device().clone()));
    let input = pooling.output_size(encoder.hidden_size());
    let head = Head::new(
        &ParamBuilder::new(&store, &source),
        HeadConfig { input_size: input, hidden_size: input, dropout: config.dropout, output_size: 1 },
    )?;
    let num_states = encoder.num_layers() + 1;
    let logits = Var::zeros(num_states, encoder.dtype(), encoder.device())?;
    let task = ProbeTask {
        dimension,
        logits,
        head_params: store.into_inner(),
        head,
        pooling,
        states,
        dev,
        on_step: RefCell::new(on_step),
    };
    let log = run_stage(&stage, &task, &train, config)?;
    let profile = task.profile()?;
    profile.check_normalized()?;
    let dev_ccc = log.best().map_or(f64::NAN, |e| e.dev_mean_ccc);
    Ok(ProbeFit { profile, dev_ccc, log })
}

/// Per-utterance `(L + 1, frames, d)` states, computed once in eval mode.
fn cache_states<'a>(encoder: &Encoder, records: &[&'a UtteranceRecord], batch_size: usize) -> Result<HashMap<&'a str, Tensor>> {
    let mut order: Vec<&UtteranceRecord> = records.to_vec();
    order.sort_by_key(|r| r.audio.len());
    let mut out = HashMap::new();
    let ctx = ForwardCtx::eval();
    for chunk in order.chunks(batch_size.max(1)) {
        let waves: Vec<&[f32]> = chunk.iter().map(|r| r.audio.as_slice()).collect();
        let outputs = encoder.encode(&encoder.audio_batch(&waves)?, &ctx)?;
        for (i, r) in chunk.iter().enumerate() {
            out.insert(r.id.as_str(), item_states(&outputs, i)?.detach());
        }
    }
    Ok(out)
}

/// Files written by [`export_profile`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileArtifacts {
    pub plot: PathBuf,
    pub table: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    layer_index: usize,
    weight: f64,
}

/// Bar chart `probe_<dimension>.png` and table `probe_<dimension>.csv` in
/// `dir`.
pub fn export_profile(profile: &ProbeProfile, dir: &Path) -> Result<ProfileArtifacts> {
    profile.check_normalized()?;
    std::fs::create_dir_all(dir)?;
    let name = format!("probe_{}", profile.dimension.name());
    let plot = dir.join(format!("{name}.png"));
    let table = dir.join(format!("{name}.csv"));
    ser_core::plot::write_bar_chart(&plot, &profile.weights)?;
    let mut writer = csv::Writer::from_path(&table).map_err(csv_error)?;
    for (layer_index, &weight) in profile.weights.iter().enumerate() {
        writer.serialize(ProfileRow { layer_index, weight }).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(ProfileArtifacts { plot, table })
}

/// Weights from a table written by [`export_profile`].
pub fn read_profile_table(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut weights = Vec::new();
    for (expected, row) in reader.deserialize::<ProfileRow>().enumerate() {
        let row = row.map_err(csv_error)?;
        if row.layer_index != expected {
            return Err(Error::invalid(format!(
                "{}: layer index {} where {expected} was expected",
                path.display(),
                row.layer_index
            )));
        }
        weights.push(row.weight);
    }
    Ok(weights)
}

fn csv_error(e: csv::Error) -> Error {
    Error::invalid(format!("profile table: {e}"))
}
