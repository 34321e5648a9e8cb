//! Pooling, fusion and the regression head on top of one or two encoders.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};
use ser_core::corpus::UtteranceRecord;
use ser_core::EmotionTriple;

use crate::encoders::{Encoder, EncoderBatch, EncoderSpec, FreezePolicy, Modality};
use crate::error::{Error, Result};
use crate::nn::{length_mask, linear, MASK_NEG};
use crate::params::{ForwardCtx, ParamBuilder, ParamSource, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "ser-model";
pub const CHECKPOINT_VERSION: &str = "1";

/// How average and max pooling are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Elementwise sum; keeps the encoder width.
    #[default]
    Sum,
    /// Concatenation; doubles the width.
    Concat,
}

impl PoolingMode {
    pub fn output_size(self, hidden: usize) -> usize {
        match self {
            PoolingMode::Sum => hidden,
            PoolingMode::Concat => 2 * hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Audio,
    Text,
    Fused,
}

/// Pooled utterance features, `(batch, size)`.
#[derive(Debug, Clone)]
pub struct PooledFeature {
    pub vector: Tensor,
    pub source: FeatureSource,
}

impl PooledFeature {
    pub fn size(&self) -> Result<usize> {
        Ok(self.vector.dim(D::Minus1)?)
    }
}

/// Mean and max over the first `valid[i]` frames of `states` (`(batch, K, d)`).
pub fn pool(states: &Tensor, valid: &[usize], mode: PoolingMode) -> Result<Tensor> {
    let (b, k, _) = states.dims3()?;
    if valid.len() != b {
        return Err(Error::invalid(format!("{} lengths for a batch of {b}", valid.len())));
    }
    if let Some(i) = valid.iter().position(|&l| l == 0 || l > k) {
        return Err(Error::invalid(format!("item {i}: valid length {} outside 1..={k}", valid[i])));
    }
    let mask = length_mask(valid, k, states.dtype(), states.device())?.unsqueeze(2)?;
    let counts = Tensor::from_vec(valid.iter().map(|&l| l as f64).collect::<Vec<_>>(), (b, 1), states.device())?
        .to_dtype(states.dtype())?;
    let mean = states.broadcast_mul(&mask)?.sum(1)?.broadcast_div(&counts)?;
    let neg = ((mask - 1.0)? * -MASK_NEG)?;
    let max = states.broadcast_add(&neg)?.max(1)?;
    Ok(match mode {
        PoolingMode::Sum => (mean + max)?,
        PoolingMode::Concat => Tensor::cat(&[mean, max], 1)?,
    })
}

/// Concatenates audio and text features along the feature axis.
pub fn fuse(audio: &PooledFeature, text: &PooledFeature) -> Result<PooledFeature> {
    if audio.source != FeatureSource::Audio || text.source != FeatureSource::Text {
        return Err(Error::invalid(format!(
            "fusion needs one audio and one text feature, got {:?} and {:?}",
            audio.source, text.source
        )));
    }
    Ok(PooledFeature {
        vector: Tensor::cat(&[&audio.vector, &text.vector], 1)?,
        source: FeatureSource::Fused,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_size: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub output_size: usize,
}

impl HeadConfig {
    /// Three outputs, hidden width equal to the input width.
    pub fn regression(input_size: usize, dropout: f64) -> Self {
        Self { input_size, hidden_size: input_size, dropout, output_size: 3 }
    }

    /// Parameter count of the two affine layers.
    pub fn parameter_count(&self) -> usize {
        self.input_size * self.hidden_size + self.hidden_size + self.hidden_size * self.output_size + self.output_size
    }

    fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden_size == 0 || self.output_size == 0 {
            return Err(Error::invalid("head sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("head dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// `linear -> tanh -> dropout -> linear`, no output activation.
#[derive(Debug, Clone)]
pub struct Head {
    config: HeadConfig,
    hidden: Linear,
    output: Linear,
}

impl Head {
    pub fn new(vb: &ParamBuilder, config: HeadConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            hidden: linear(&vb.pp("hidden"), config.input_size, config.hidden_size)?,
            output: linear(&vb.pp("output"), config.hidden_size, config.output_size)?,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let size = x.dim(D::Minus1)?;
        if size != self.config.input_size {
            return Err(Error::invalid(format!(
                "head expects {} input features, got {size}",
                self.config.input_size
            )));
        }
        let h = self.hidden.forward(x)?.tanh()?;
        let h = ctx.dropout_p(&h, self.config.dropout)?;
        Ok(self.output.forward(&h)?)
    }
}

/// Serializable description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerModelConfig {
    pub audio: EncoderSpec,
    #[serde(default)]
    pub text: Option<EncoderSpec>,
    #[serde(default)]
    pub pooling: PoolingMode,
    /// Defaults to the pooled input size.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    #[serde(default = "default_dropout")]
    pub head_dropout: f64,
    #[serde(default)]
    pub head_seed: u64,
}

fn default_dropout() -> f64 {
    0.1
}

impl SerModelConfig {
    pub fn audio_only(audio: EncoderSpec) -> Self {
        Self { audio, text: None, pooling: PoolingMode::Sum, head_hidden: None, head_dropout: 0.1, head_seed: 0 }
    }

    pub fn audio_text(audio: EncoderSpec, text: EncoderSpec) -> Self {
        Self { text: Some(text), ..Self::audio_only(audio) }
    }

    pub fn head_config(&self) -> HeadConfig {
        let mut input = self.pooling.output_size(self.audio.hidden_size());
        if let Some(t) = &self.text {
            input += self.pooling.output_size(t.hidden_size());
        }
        HeadConfig {
            input_size: input,
            hidden_size: self.head_hidden.unwrap_or(input),
            dropout: self.head_dropout,
            output_size: 3,
        }
    }
}

/// Inputs for one forward pass.
#[derive(Debug, Clone)]
pub struct ModelBatch {
    pub audio: EncoderBatch,
    pub text: Option<EncoderBatch>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: SerModelConfig,
    audio_freeze: FreezePolicy,
    text_freeze: FreezePolicy,
}

/// Audio-only or audio-textual emotion regressor.
pub struct SerModel {
    config: SerModelConfig,
    audio: Encoder,
    text: Option<Encoder>,
    head_params: ParamStore,
    head: Head,
}

impl std::fmt::Debug for SerModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SerModel")
            .field("audio", &self.audio)
            .field("text", &self.text)
            .field("head", self.head.config())
            .finish()
    }
}

impl SerModel {
    /// Loads encoders per `config` in single precision with a fresh head.
    pub fn new(config: SerModelConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: SerModelConfig, dtype: DType) -> Result<Self> {
        let audio = Encoder::load(&config.audio, dtype)?;
        let text = config.text.as_ref().map(|t| Encoder::load(t, dtype)).transpose()?;
        Self::from_parts(config, audio, text)
    }

    /// Builds a model around loaded encoders with a fresh head seeded by
    /// `config.head_seed`. Encoder specs in `config` are replaced by those of
    /// the encoders.
    pub fn from_parts(mut config: SerModelConfig, audio: Encoder, text: Option<Encoder>) -> Result<Self> {
        if audio.modality() != Modality::Audio {
            return Err(Error::invalid("first encoder must be an audio encoder"));
        }
        if let Some(t) = &text {
            if t.modality() != Modality::Text {
                return Err(Error::invalid("second encoder must be a text encoder"));
            }
            if t.dtype() != audio.dtype() {
                return Err(Error::invalid("encoders use different precisions"));
            }
        }
        config.audio = audio.spec().clone();
        config.text = text.as_ref().map(|t| t.spec().clone());
        let source = ParamSource::Random { seed: config.head_seed };
        let (head_params, head) = build_head(&config, &source, audio.dtype())?;
        Ok(Self { config, audio, text, head_params, head })
    }

    pub fn config(&self) -> &SerModelConfig {
        &self.config
    }

    pub fn audio_encoder(&self) -> &Encoder {
        &self.audio
    }

    pub fn text_encoder(&self) -> Option<&Encoder> {
        self.text.as_ref()
    }

    pub fn audio_encoder_mut(&mut self) -> &mut Encoder {
        &mut self.audio
    }

    pub fn text_encoder_mut(&mut self) -> Option<&mut Encoder> {
        self.text.as_mut()
    }

    /// Hands the encoders back, dropping the head.
    pub fn into_encoders(self) -> (Encoder, Option<Encoder>) {
        (self.audio, self.text)
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_params(&self) -> &ParamStore {
        &self.head_params
    }

    pub fn is_audio_text(&self) -> bool {
        self.text.is_some()
    }

    pub fn dtype(&self) -> DType {
        self.audio.dtype()
    }

    pub fn set_freeze(&mut self, audio: FreezePolicy, text: FreezePolicy) {
        self.audio.set_freeze(audio);
        if let Some(t) = &mut self.text {
            t.set_freeze(text);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.audio.parameter_count()
            + self.text.as_ref().map_or(0, Encoder::parameter_count)
            + self.head_params.num_elements(|_| true)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.audio.trainable_parameter_count()
            + self.text.as_ref().map_or(0, Encoder::trainable_parameter_count)
            + self.head_params.num_elements(|_| true)
    }

    /// Every variable the optimizer may update, names prefixed by component.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let mut vars: Vec<(String, Var)> = Vec::new();
        vars.extend(self.audio.trainable_vars().into_iter().map(|(n, v)| (format!("audio.{n}"), v)));
        if let Some(t) = &self.text {
            vars.extend(t.trainable_vars().into_iter().map(|(n, v)| (format!("text.{n}"), v)));
        }
        vars.extend(self.head_params.vars_where(|_| true).into_iter().map(|(n, v)| (format!("head.{n}"), v)));
        vars
    }

    /// Checksum of all frozen encoder parameters.
    pub fn frozen_checksum(&self) -> Result<u64> {
        let a = self.audio.checksum(true)?;
        let t = self.text.as_ref().map(|t| t.checksum(true)).transpose()?.unwrap_or(0);
        Ok(a ^ t.rotate_left(1))
    }

    /// Snapshot of every parameter value, for best-epoch restoration.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (prefix, store) in self.stores() {
            for (n, t) in store.snapshot()? {
                out.insert(format!("{prefix}{n}"), t);
            }
        }
        Ok(out)
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, store) in self.stores() {
            let part: BTreeMap<String, Tensor> = snapshot
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_owned(), t.clone())))
                .collect();
            store.restore(&part)?;
        }
        Ok(())
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut stores = vec![("audio.", self.audio.params())];
        if let Some(t) = &self.text {
            stores.push(("text.", t.params()));
        }
        stores.push(("head.", &self.head_params));
        stores
    }

    /// Pads the records' audio (and transcripts for audio-textual models).
    pub fn batch(&self, records: &[&UtteranceRecord]) -> Result<ModelBatch> {
        let waves: Vec<&[f32]> = records.iter().map(|r| r.audio.as_slice()).collect();
        let audio = self.audio.audio_batch(&waves)?;
        let text = match &self.text {
            Some(t) => {
                let texts: Vec<&str> = records.iter().map(|r| r.transcript.as_str()).collect();
                Some(t.text_batch(&texts)?)
            }
            None => None,
        };
        Ok(ModelBatch { audio, text })
    }

    /// Pooled audio features from the final layer.
    pub fn pool_audio(&self, batch: &EncoderBatch, ctx: &ForwardCtx) -> Result<PooledFeature> {
        let out = self.audio.encode(batch, ctx)?;
        Ok(PooledFeature {
            vector: pool(out.last()?, &out.valid_lengths, self.config.pooling)?,
            source: FeatureSource::Audio,
        })
    }

    pub fn pool_text(&self, batch: &EncoderBatch, ctx: &ForwardCtx) -> Result<PooledFeature> {
        let text = self.text.as_ref().ok_or_else(|| Error::invalid("model has no text encoder"))?;
        let out = text.encode(batch, ctx)?;
        Ok(PooledFeature {
            vector: pool(out.last()?, &out.valid_lengths, self.config.pooling)?,
            source: FeatureSource::Text,
        })
    }

    /// `(batch, 3)` estimates from audio only.
    pub fn forward_audio(&self, batch: &ModelBatch, ctx: &ForwardCtx) -> Result<Tensor> {
        if self.text.is_some() {
            return Err(Error::invalid("audio-textual model needs forward_audiotext"));
        }
        self.head.forward(&self.pool_audio(&batch.audio, ctx)?.vector, ctx)
    }

    /// `(batch, 3)` estimates from fused audio and text features.
    pub fn forward_audiotext(&self, batch: &ModelBatch, ctx: &ForwardCtx) -> Result<Tensor> {
        let text_batch = batch.text.as_ref().ok_or_else(|| Error::invalid("batch has no text"))?;
        let fused = fuse(&self.pool_audio(&batch.audio, ctx)?, &self.pool_text(text_batch, ctx)?)?;
        self.head.forward(&fused.vector, ctx)
    }

    /// Dispatches on the model's modalities.
    pub fn forward(&self, batch: &ModelBatch, ctx: &ForwardCtx) -> Result<Tensor> {
        if self.text.is_some() {
            self.forward_audiotext(batch, ctx)
        } else {
            self.forward_audio(batch, ctx)
        }
    }

    /// Eval-mode estimates in record order, computed in length-sorted
    /// batches of `batch_size`.
    pub fn predict_batched(&self, records: &[&UtteranceRecord], batch_size: usize) -> Result<Vec<EmotionTriple>> {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by_key(|&i| records[i].audio.len());
        let mut out = vec![EmotionTriple::new(0.0, 0.0, 0.0); records.len()];
        let ctx = ForwardCtx::eval();
        for chunk in order.chunks(batch_size.max(1)) {
            let items: Vec<&UtteranceRecord> = chunk.iter().map(|&i| records[i]).collect();
            let pred = self.forward(&self.batch(&items)?, &ctx)?;
            let rows = pred.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            for (&i, row) in chunk.iter().zip(rows) {
                out[i] = EmotionTriple::new(row[0], row[1], row[2]);
            }
        }
        Ok(out)
    }

    /// Eval-mode head inputs (pooled, fused when there is text) in record
    /// order, `(n, head input size)`.
    pub fn features(&self, records: &[&UtteranceRecord], batch_size: usize) -> Result<Tensor> {
        let ctx = ForwardCtx::eval();
        let mut rows = Vec::new();
        for chunk in records.chunks(batch_size.max(1)) {
            let batch = self.batch(chunk)?;
            let audio = self.pool_audio(&batch.audio, &ctx)?;
            let feature = match &batch.text {
                Some(t) => fuse(&audio, &self.pool_text(t, &ctx)?)?,
                None => audio,
            };
            rows.push(feature.vector.detach());
        }
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Independent copy of the model.
    pub fn try_clone(&self) -> Result<Self> {
        let audio = self.audio.try_clone()?;
        let text = self.text.as_ref().map(Encoder::try_clone).transpose()?;
        let source = ParamSource::Loaded { tensors: self.head_params.tensors(""), prefixes: Vec::new() };
        let (head_params, head) = build_head(&self.config, &source, self.dtype())?;
        Ok(Self { config: self.config.clone(), audio, text, head_params, head })
    }

    /// Writes one safetensors file holding every parameter, with the config
    /// and a format version in the header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (prefix, store) in self.stores() {
            tensors.extend(store.tensors(prefix));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let meta = CheckpointMeta {
            config: self.config.clone(),
            audio_freeze: self.audio.freeze_policy(),
            text_freeze: self.text.as_ref().map(Encoder::freeze_policy).unwrap_or_default(),
        };
        let mut header = HashMap::new();
        header.insert("format".to_owned(), CHECKPOINT_FORMAT.to_owned());
        header.insert("version".to_owned(), CHECKPOINT_VERSION.to_owned());
        header.insert("meta".to_owned(), serde_json::to_string(&meta)?);
        safetensors::serialize_to_file(tensors, Some(header), path)
            .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))
    }

    /// Reads a file written by [`SerModel::save`]; other formats or versions
    /// are refused.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?;
        let fields = header.metadata().clone().unwrap_or_default();
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::checkpoint(format!("{}: header lacks `{k}`", path.display())))
        };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(Error::checkpoint(format!("{}: not a {CHECKPOINT_FORMAT} checkpoint", path.display())));
        }
        let version = get("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(format!(
                "{}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let meta: CheckpointMeta = serde_json::from_str(get("meta")?)?;
        let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let dtype = all
            .values()
            .next()
            .map(Tensor::dtype)
            .ok_or_else(|| Error::checkpoint("checkpoint holds no tensors"))?;
        let part = |prefix: &str| -> HashMap<String, Tensor> {
            all.iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_owned(), t.clone())))
                .collect()
        };
        let audio = Encoder::from_tensors(&meta.config.audio, part("audio."), dtype)?.apply_freeze(meta.audio_freeze);
        let text = meta
            .config
            .text
            .as_ref()
            .map(|spec| Encoder::from_tensors(spec, part("text."), dtype).map(|e| e.apply_freeze(meta.text_freeze)))
            .transpose()?;
        let source = ParamSource::Loaded { tensors: part("head."), prefixes: Vec::new() };
        let (head_params, head) = build_head(&meta.config, &source, dtype)?;
        Ok(Self { config: meta.config, audio, text, head_params, head })
    }
}

fn build_head(config: &SerModelConfig, source: &ParamSource, dtype: DType) -> Result<(ParamStore, Head)> {
    let store = RefCell::new(ParamStore::new(dtype, Device::Cpu));
    let head = Head::new(&ParamBuilder::new(&store, source), config.head_config())?;
    Ok((store.into_inner(), head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{preset, tiny_audio};

    fn t3(v: Vec<Vec<Vec<f64>>>) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn pool_hand_example() {
        // Frames (1,2) and (3,0): mean (2,1), max (3,2).
        let s = t3(vec![vec![vec![1.0, 2.0], vec![3.0, 0.0]]]);
        let p = pool(&s, &[2], PoolingMode::Sum).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p, vec![vec![5.0, 3.0]]);
        let c = pool(&s, &[2], PoolingMode::Concat).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(c, vec![vec![2.0, 1.0, 3.0, 2.0]]);
    }

    #[test]
    fn pool_constant_and_single_frame() {
        let s = t3(vec![vec![vec![0.5, -1.0]; 4]]);
        assert_eq!(pool(&s, &[4], PoolingMode::Sum).unwrap().to_vec2::<f64>().unwrap(), vec![vec![1.0, -2.0]]);
        let s = t3(vec![vec![vec![0.25, 3.0]]]);
        assert_eq!(pool(&s, &[1], PoolingMode::Sum).unwrap().to_vec2::<f64>().unwrap(), vec![vec![0.5, 6.0]]);
    }

    #[test]
    fn pool_ignores_padding() {
        let s = t3(vec![vec![vec![1.0, 2.0], vec![3.0, 0.0], vec![100.0, -100.0]]]);
        let p = pool(&s, &[2], PoolingMode::Sum).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p, vec![vec![5.0, 3.0]]);
        assert!(pool(&s, &[0], PoolingMode::Sum).is_err());
    }

    #[test]
    fn fuse_concatenates() {
        let a = PooledFeature { vector: Tensor::ones((2, 16), DType::F32, &Device::Cpu).unwrap(), source: FeatureSource::Audio };
        let t = PooledFeature { vector: Tensor::zeros((2, 8), DType::F32, &Device::Cpu).unwrap(), source: FeatureSource::Text };
        let f = fuse(&a, &t).unwrap();
        assert_eq!(f.size().unwrap(), 24);
        assert_eq!(f.source, FeatureSource::Fused);
        let head = f.vector.narrow(1, 0, 16).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(head, a.vector.to_vec2::<f32>().unwrap());
        assert!(fuse(&a, &a).is_err());
    }

    #[test]
    fn full_scale_fused_width() {
        let config = SerModelConfig::audio_text(crate::encoders::distilhubert(), crate::encoders::tinybert());
        assert_eq!(config.head_config().input_size, 1080);
        assert_eq!(config.head_config().parameter_count(), 1_170_723);
    }

    fn tiny_model(text: bool) -> SerModel {
        let audio = tiny_audio(2, 16, 1);
        let config = if text {
            SerModelConfig::audio_text(audio, preset("tiny-text-2x16", 2).unwrap())
        } else {
            SerModelConfig::audio_only(audio)
        };
        SerModel::new(config).unwrap()
    }

    fn records(n: usize) -> Vec<UtteranceRecord> {
        ser_core::corpus::generate_synthetic_corpus(40, 9, 16_000).unwrap().into_iter().take(n).collect()
    }

    #[test]
    fn head_zero_weights_give_zero() {
        let model = tiny_model(false);
        for (_, var) in model.head_params().iter() {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let recs = records(3);
        let refs: Vec<&UtteranceRecord> = recs.iter().collect();
        let out = model.predict_batched(&refs, 4).unwrap();
        assert!(out.iter().all(|t| t.to_array() == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn head_matches_matrix_oracle() {
        let config = HeadConfig { input_size: 4, hidden_size: 5, dropout: 0.1, output_size: 3 };
        let store = RefCell::new(ParamStore::new(DType::F64, Device::Cpu));
        let head = Head::new(&ParamBuilder::new(&store, &ParamSource::Random { seed: 3 }), config).unwrap();
        let store = store.into_inner();
        let m = |n: &str| store.get(n).unwrap().as_tensor().to_vec2::<f64>().unwrap();
        let v = |n: &str| store.get(n).unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let (w1, b1, w2, b2) = (m("hidden.weight"), v("hidden.bias"), m("output.weight"), v("output.bias"));
        let x = [0.3, -1.2, 0.7, 2.0];
        let h: Vec<f64> = (0..5).map(|j| (b1[j] + (0..4).map(|i| w1[j][i] * x[i]).sum::<f64>()).tanh()).collect();
        let y: Vec<f64> = (0..3).map(|k| b2[k] + (0..5).map(|j| w2[k][j] * h[j]).sum::<f64>()).collect();
        let input = Tensor::new(&[x], &Device::Cpu).unwrap();
        let ctx = ForwardCtx::eval();
        let a = head.forward(&input, &ctx).unwrap().to_vec2::<f64>().unwrap();
        let b = head.forward(&input, &ctx).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            assert!((a[0][k] - y[k]).abs() < 1e-6);
        }
        assert!(head.forward(&Tensor::new(&[[1.0f64; 3]], &Device::Cpu).unwrap(), &ctx).is_err());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let model = tiny_model(true);
        let recs = records(4);
        let fwd: Vec<&UtteranceRecord> = recs.iter().collect();
        let rev: Vec<&UtteranceRecord> = recs.iter().rev().collect();
        let ctx = ForwardCtx::eval();
        let a = model.forward(&model.batch(&fwd).unwrap(), &ctx).unwrap().to_vec2::<f32>().unwrap();
        let b = model.forward(&model.batch(&rev).unwrap(), &ctx).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|r| r.len() == 3));
        for i in 0..4 {
            for k in 0..3 {
                assert!((a[i][k] - b[3 - i][k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_text_columns_reduce_to_audio_model() {
        let audio_model = tiny_model(false);
        let fused = tiny_model(true);
        // Copy the audio encoder so both models share its values.
        let at = SerModel::from_parts(
            fused.config().clone(),
            audio_model.audio_encoder().try_clone().unwrap(),
            Some(fused.text_encoder().unwrap().try_clone().unwrap()),
        )
        .unwrap();
        let d_a = 16;
        let w_audio = audio_model.head_params().get("hidden.weight").unwrap().as_tensor().clone();
        let hidden_fused = at.head_params().get("hidden.weight").unwrap();
        // The fused head has hidden width 32; embed the audio head in its
        // first 16 units and zero everything reading text features.
        let (h_f, in_f) = hidden_fused.dims2().unwrap();
        let mut w = vec![vec![0f32; in_f]; h_f];
        let wa = w_audio.to_vec2::<f32>().unwrap();
        for (j, row) in wa.iter().enumerate() {
            w[j][..d_a].copy_from_slice(row);
        }
        hidden_fused.set(&Tensor::new(w, &Device::Cpu).unwrap()).unwrap();
        let ba = audio_model.head_params().get("hidden.bias").unwrap().as_tensor().to_vec1::<f32>().unwrap();
        let mut b = vec![0f32; h_f];
        b[..16].copy_from_slice(&ba);
        at.head_params().get("hidden.bias").unwrap().set(&Tensor::new(b, &Device::Cpu).unwrap()).unwrap();
        let wo = audio_model.head_params().get("output.weight").unwrap().as_tensor().to_vec2::<f32>().unwrap();
        let mut w2 = vec![vec![0f32; h_f]; 3];
        for k in 0..3 {
            w2[k][..16].copy_from_slice(&wo[k]);
        }
        at.head_params().get("output.weight").unwrap().set(&Tensor::new(w2, &Device::Cpu).unwrap()).unwrap();
        let bo = audio_model.head_params().get("output.bias").unwrap().as_tensor().copy().unwrap();
        at.head_params().get("output.bias").unwrap().set(&bo).unwrap();

        let recs = records(3);
        let refs: Vec<&UtteranceRecord> = recs.iter().collect();
        let a = audio_model.predict_batched(&refs, 4).unwrap();
        let b = at.predict_batched(&refs, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.to_array().iter().zip(y.to_array()) {
                assert!((p - q).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let model = tiny_model(true).try_clone().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        model.save(&path).unwrap();
        let back = SerModel::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        let recs = records(3);
        let refs: Vec<&UtteranceRecord> = recs.iter().collect();
        assert_eq!(model.predict_batched(&refs, 2).unwrap(), back.predict_batched(&refs, 2).unwrap());

        let bytes = std::fs::read(&path).unwrap();
        let needle = format!("\"version\":\"{CHECKPOINT_VERSION}\"");
        let pos = bytes.windows(needle.len()).position(|w| w == needle.as_bytes()).unwrap();
        let mut bad = bytes.clone();
        bad[pos + needle.len() - 2] = b'9';
        std::fs::write(&path, bad).unwrap();
        let err = SerModel::load(&path).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }
}
