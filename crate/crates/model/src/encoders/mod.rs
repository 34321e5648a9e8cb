//! Speech and text encoders exposing every hidden layer.

mod audio;
pub mod checkpoint;
pub mod spec;
mod text;
pub mod tokenizer;

use std::cell::RefCell;
use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use checkpoint::{resolve_checkpoint, CACHE_ENV};
pub use spec::{
    distilhubert, hubert_base, preset, tinybert, tiny_audio, tiny_text, w2v2_large_robust_pruned, Architecture,
    AudioConfig, CheckpointRef, EncoderSpec, FeatureNorm, Frontend, Modality, TextConfig, PRESET_NAMES,
};
pub use tokenizer::{Tokenizer, WhitespaceTokenizer};

use crate::error::{Error, Result};
use crate::params::{ForwardCtx, ParamBuilder, ParamSource, ParamStore};
use audio::AudioNet;
use text::TextNet;

/// Which encoder parameters are excluded from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub freeze_frontend: bool,
    pub freeze_all: bool,
}

impl FreezePolicy {
    pub const NONE: Self = Self { freeze_frontend: false, freeze_all: false };
    pub const FRONTEND: Self = Self { freeze_frontend: true, freeze_all: false };
    pub const ALL: Self = Self { freeze_frontend: true, freeze_all: true };
}

/// Padded encoder input: `(batch, S)` float samples or `(batch, N)` u32
/// token ids, plus the unpadded length of each item.
#[derive(Debug, Clone)]
pub struct EncoderBatch {
    pub data: Tensor,
    pub lengths: Vec<usize>,
}

/// Hidden states of one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `L + 1` tensors of shape `(batch, K, d)`; index 0 is the frontend
    /// output.
    pub layer_states: Vec<Tensor>,
    /// Valid frames (or tokens) per item, each `<= K`.
    pub valid_lengths: Vec<usize>,
}

impl EncoderOutput {
    pub fn num_frames(&self) -> Result<usize> {
        Ok(self.last()?.dim(1)?)
    }

    pub fn last(&self) -> Result<&Tensor> {
        self.layer_states
            .last()
            .ok_or_else(|| Error::invalid("encoder output without layer states"))
    }
}

enum Net {
    Audio(AudioNet),
    Text(TextNet),
}

/// A loaded encoder with its parameters, tokenizer and freeze policy.
pub struct Encoder {
    spec: EncoderSpec,
    params: ParamStore,
    net: Net,
    tokenizer: Option<Tokenizer>,
    freeze: FreezePolicy,
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder")
            .field("name", &self.spec.name)
            .field("layers", &self.num_layers())
            .field("hidden", &self.hidden_size())
            .field("freeze", &self.freeze)
            .finish()
    }
}

/// Loads an encoder in single precision on the CPU.
pub fn load_encoder(spec: &EncoderSpec) -> Result<Encoder> {
    Encoder::load(spec, DType::F32)
}

impl Encoder {
    /// Resolves the checkpoint (or seeds a random one), checks it against
    /// the `EncoderSpec` and applies `keep_layers`.
    pub fn load(spec: &EncoderSpec, dtype: DType) -> Result<Self> {
        spec.validate()?;
        match &spec.checkpoint {
            CheckpointRef::Random { seed } => Self::build(spec, ParamSource::Random { seed: *seed }, dtype, None),
            reference => {
                let dir = resolve_checkpoint(reference)?;
                checkpoint::check_architecture(&spec.architecture, &checkpoint::read_architecture(&dir)?)?;
                let tensors = checkpoint::read_tensors(&dir)?;
                let prefixes = vec!["hubert.".into(), "wav2vec2.".into(), "bert.".into()];
                Self::build(spec, ParamSource::Loaded { tensors, prefixes }, dtype, Some(&dir))
            }
        }
    }

    /// Rebuilds an encoder from saved parameter values (names as in
    /// [`Encoder::params`]).
    pub fn from_tensors(spec: &EncoderSpec, tensors: HashMap<String, Tensor>, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let dir = match &spec.checkpoint {
            CheckpointRef::Random { .. } => None,
            _ if spec.modality == Modality::Text && spec.tokenizer.is_none() => {
                Some(resolve_checkpoint(&spec.checkpoint)?)
            }
            _ => None,
        };
        let source = ParamSource::Loaded { tensors, prefixes: Vec::new() };
        Self::build(spec, source, dtype, dir.as_deref())
    }

    fn build(spec: &EncoderSpec, source: ParamSource, dtype: DType, dir: Option<&std::path::Path>) -> Result<Self> {
        let store = RefCell::new(ParamStore::new(dtype, Device::Cpu));
        let vb = ParamBuilder::new(&store, &source);
        let layers = spec.num_layers();
        let (net, tokenizer) = match &spec.architecture {
            Architecture::Audio(c) => (Net::Audio(AudioNet::new(&vb, c, layers)?), None),
            Architecture::Text(c) => {
                let tokenizer = match (&spec.tokenizer, dir) {
                    (Some(path), _) => Tokenizer::from_file(path)?,
                    (None, Some(dir)) => Tokenizer::from_checkpoint_dir(dir)?,
                    (None, None) => Tokenizer::Whitespace(WhitespaceTokenizer::synthetic_lexicon()),
                };
                if tokenizer.vocab_size() > c.vocab_size {
                    return Err(Error::checkpoint(format!(
                        "dimension mismatch: tokenizer has {} entries, embedding table {}",
                        tokenizer.vocab_size(),
                        c.vocab_size
                    )));
                }
                (Net::Text(TextNet::new(&vb, c, layers)?), Some(tokenizer))
            }
        };
        Ok(Self {
            spec: spec.clone(),
            params: store.into_inner(),
            net,
            tokenizer,
            freeze: FreezePolicy::NONE,
        })
    }

    /// Independent copy with the same parameter values.
    pub fn try_clone(&self) -> Result<Self> {
        let mut copy = Self::from_tensors_with_tokenizer(&self.spec, self.params.tensors(""), self.params.dtype(), self.tokenizer.clone())?;
        copy.freeze = self.freeze;
        Ok(copy)
    }

    fn from_tensors_with_tokenizer(
        spec: &EncoderSpec,
        tensors: HashMap<String, Tensor>,
        dtype: DType,
        tokenizer: Option<Tokenizer>,
    ) -> Result<Self> {
        let store = RefCell::new(ParamStore::new(dtype, Device::Cpu));
        let source = ParamSource::Loaded { tensors, prefixes: Vec::new() };
        let vb = ParamBuilder::new(&store, &source);
        let net = match &spec.architecture {
            Architecture::Audio(c) => Net::Audio(AudioNet::new(&vb, c, spec.num_layers())?),
            Architecture::Text(c) => Net::Text(TextNet::new(&vb, c, spec.num_layers())?),
        };
        Ok(Self {
            spec: spec.clone(),
            params: store.into_inner(),
            net,
            tokenizer,
            freeze: FreezePolicy::NONE,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn modality(&self) -> Modality {
        self.spec.modality
    }

    /// `L`.
    pub fn num_layers(&self) -> usize {
        self.spec.num_layers()
    }

    /// `d`.
    pub fn hidden_size(&self) -> usize {
        self.spec.hidden_size()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn tokenizer(&self) -> Option<&Tokenizer> {
        self.tokenizer.as_ref()
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        self.freeze
    }

    /// True for convolutional feature extractor or token embedding
    /// parameters.
    pub fn is_frontend_param(&self, name: &str) -> bool {
        match self.spec.modality {
            Modality::Audio => audio::FRONTEND_PREFIXES.iter().any(|p| name.starts_with(p)),
            Modality::Text => text::FRONTEND_PREFIXES.iter().any(|p| name.starts_with(p)),
        }
    }

    pub fn is_frozen_param(&self, name: &str) -> bool {
        self.freeze.freeze_all || (self.freeze.freeze_frontend && self.is_frontend_param(name))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_elements(|_| true)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.num_elements(|n| !self.is_frozen_param(n))
    }

    /// Variables the optimizer may update.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.params.vars_where(|n| !self.is_frozen_param(n))
    }

    /// Checksum over frozen (or, with `frozen == false`, trainable) values.
    pub fn checksum(&self, frozen: bool) -> Result<u64> {
        self.params.checksum(|n| self.is_frozen_param(n) == frozen)
    }

    /// Sets the freeze policy; `freeze_all` implies `freeze_frontend`.
    pub fn apply_freeze(mut self, policy: FreezePolicy) -> Self {
        self.set_freeze(policy);
        self
    }

    pub fn set_freeze(&mut self, policy: FreezePolicy) {
        self.freeze = FreezePolicy {
            freeze_frontend: policy.freeze_frontend || policy.freeze_all,
            freeze_all: policy.freeze_all,
        };
    }

    /// Keeps the first `keep_first` transformer layers and drops the
    /// parameters of the rest.
    pub fn prune_layers(mut self, keep_first: usize) -> Result<Self> {
        let l = self.num_layers();
        if keep_first == 0 || keep_first > l {
            return Err(Error::invalid(format!("cannot keep {keep_first} of {l} layers")));
        }
        let prefix = match self.spec.modality {
            Modality::Audio => "encoder.layers.",
            Modality::Text => "encoder.layer.",
        };
        for i in keep_first..l {
            self.params.remove_prefix(&format!("{prefix}{i}."));
        }
        match &mut self.net {
            Net::Audio(n) => n.truncate(keep_first),
            Net::Text(n) => n.truncate(keep_first),
        }
        self.spec.keep_layers = Some(keep_first);
        Ok(self)
    }

    /// Zero-padded waveform batch.
    pub fn audio_batch(&self, waves: &[&[f32]]) -> Result<EncoderBatch> {
        let Architecture::Audio(config) = &self.spec.architecture else {
            return Err(Error::invalid(format!("{} is not an audio encoder", self.spec.name)));
        };
        if waves.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let lengths: Vec<usize> = waves.iter().map(|w| w.len()).collect();
        for (i, &len) in lengths.iter().enumerate() {
            if config.num_frames(len) == 0 {
                return Err(Error::invalid(format!(
                    "item {i}: {len} samples is too short for the convolutional frontend"
                )));
            }
        }
        let max = *lengths.iter().max().unwrap_or(&0);
        let mut data = vec![0f32; waves.len() * max];
        for (row, w) in data.chunks_mut(max).zip(waves) {
            row[..w.len()].copy_from_slice(w);
        }
        let data = Tensor::from_vec(data, (waves.len(), max), self.device())?.to_dtype(self.dtype())?;
        Ok(EncoderBatch { data, lengths })
    }

    /// Tokenized and padded text batch. A transcript without any tokens
    /// becomes a single unknown token so that empty ASR hypotheses stay
    /// encodable.
    pub fn text_batch(&self, texts: &[&str]) -> Result<EncoderBatch> {
        let (Some(tokenizer), Net::Text(net)) = (&self.tokenizer, &self.net) else {
            return Err(Error::invalid(format!("{} is not a text encoder", self.spec.name)));
        };
        let ids = texts
            .iter()
            .map(|t| {
                let ids = tokenizer.encode(t, net.max_positions())?;
                Ok(if ids.is_empty() { vec![0] } else { ids })
            })
            .collect::<Result<Vec<_>>>()?;
        self.token_batch(&ids)
    }

    /// Padded batch from explicit token ids.
    pub fn token_batch(&self, ids: &[Vec<u32>]) -> Result<EncoderBatch> {
        let (Net::Text(net), Architecture::Text(config)) = (&self.net, &self.spec.architecture) else {
            return Err(Error::invalid(format!("{} is not a text encoder", self.spec.name)));
        };
        if ids.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::invalid(format!("item {i} has no tokens")));
        }
        let max = *lengths.iter().max().unwrap_or(&0);
        if max > net.max_positions() {
            return Err(Error::invalid(format!("{max} tokens exceed {} positions", net.max_positions())));
        }
        if let Some(&bad) = ids.iter().flatten().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", config.vocab_size)));
        }
        let mut data = vec![0u32; ids.len() * max];
        for (row, item) in data.chunks_mut(max).zip(ids) {
            row[..item.len()].copy_from_slice(item);
        }
        let data = Tensor::from_vec(data, (ids.len(), max), self.device())?;
        Ok(EncoderBatch { data, lengths })
    }

    /// All layer states. Frozen parts run without gradient tracking; a
    /// fully frozen encoder also runs without dropout, so its output is a
    /// fixed function of the input.
    pub fn encode(&self, batch: &EncoderBatch, ctx: &ForwardCtx) -> Result<EncoderOutput> {
        let eval = ForwardCtx::eval();
        let ctx = if self.freeze.freeze_all { &eval } else { ctx };
        if batch.lengths.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if batch.lengths.contains(&0) {
            return Err(Error::invalid("batch item of length 0"));
        }
        let detach_front = self.freeze.freeze_frontend;
        let (layer_states, valid_lengths) = match &self.net {
            Net::Audio(net) => {
                let front = net.frontend(&batch.data, &batch.lengths, detach_front, ctx)?;
                let lengths = front.lengths.clone();
                (net.transformer(&front, ctx)?, lengths)
            }
            Net::Text(net) => {
                let mut embedded = net.embed(&batch.data, ctx)?;
                if detach_front {
                    embedded = embedded.detach();
                }
                (net.transformer(&embedded, &batch.lengths, ctx)?, batch.lengths.clone())
            }
        };
        let layer_states = if self.freeze.freeze_all {
            layer_states.into_iter().map(|t| t.detach()).collect()
        } else {
            layer_states
        };
        Ok(EncoderOutput { layer_states, valid_lengths })
    }
}
