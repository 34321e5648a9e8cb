use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frontend {
    Convolutional,
    TokenEmbedding,
}

/// Where encoder weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointRef {
    /// Seeded random initialization.
    Random { seed: u64 },
    /// Directory holding `config.json` and `model.safetensors` or
    /// `pytorch_model.bin`.
    Local(PathBuf),
    /// `org/name` on the public model hub, resolved against the local cache.
    Hub(String),
}

impl fmt::Display for CheckpointRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointRef::Random { seed } => write!(f, "random({seed})"),
            CheckpointRef::Local(p) => write!(f, "dir:{}", p.display()),
            CheckpointRef::Hub(repo) => write!(f, "hf:{repo}"),
        }
    }
}

impl FromStr for CheckpointRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(seed) = s.strip_prefix("random(").and_then(|r| r.strip_suffix(')')) {
            let seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad random seed in `{s}`")))?;
            return Ok(CheckpointRef::Random { seed });
        }
        if let Some(repo) = s.strip_prefix("hf:") {
            return Ok(CheckpointRef::Hub(repo.to_owned()));
        }
        if let Some(dir) = s.strip_prefix("dir:") {
            return Ok(CheckpointRef::Local(dir.into()));
        }
        if s.is_empty() {
            return Err(Error::invalid("empty checkpoint locator"));
        }
        Ok(CheckpointRef::Local(s.into()))
    }
}

impl Serialize for CheckpointRef {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CheckpointRef {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Normalization inside the convolutional feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureNorm {
    /// Per-channel normalization over time on the first layer only.
    Group,
    /// Per-frame normalization over channels on every layer.
    Layer,
}

/// Speech transformer in the wav2vec 2.0 / HuBERT family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub conv_dim: Vec<usize>,
    pub conv_kernel: Vec<usize>,
    pub conv_stride: Vec<usize>,
    pub conv_bias: bool,
    pub feature_norm: FeatureNorm,
    /// Pre-norm transformer layers with a final layer norm.
    pub stable_layer_norm: bool,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub layer_norm_eps: f64,
}

impl AudioConfig {
    /// Frames produced from `samples` input samples; 0 when too short.
    pub fn num_frames(&self, samples: usize) -> usize {
        self.conv_kernel
            .iter()
            .zip(&self.conv_stride)
            .fold(samples, |len, (&k, &s)| if len < k { 0 } else { (len - k) / s + 1 })
    }

    /// Product of the strides.
    pub fn downsampling(&self) -> usize {
        self.conv_stride.iter().product()
    }

    pub fn frontend_parameter_count(&self) -> usize {
        let mut total = 0;
        let mut in_ch = 1;
        for (i, (&out, &k)) in self.conv_dim.iter().zip(&self.conv_kernel).enumerate() {
            total += out * in_ch * k + if self.conv_bias { out } else { 0 };
            let has_norm = match self.feature_norm {
                FeatureNorm::Group => i == 0,
                FeatureNorm::Layer => true,
            };
            if has_norm {
                total += 2 * out;
            }
            in_ch = out;
        }
        total
    }

    pub fn parameter_count(&self, layers: usize) -> usize {
        let d = self.hidden_size;
        let c = *self.conv_dim.last().unwrap_or(&0);
        let projection = 2 * c + c * d + d;
        let pos_conv = d * (d / self.pos_conv_groups) * self.pos_conv_kernel + self.pos_conv_kernel + d;
        let encoder_norm = 2 * d;
        self.frontend_parameter_count()
            + projection
            + pos_conv
            + encoder_norm
            + layers * transformer_layer_count(d, self.intermediate_size)
    }
}

/// BERT-style text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub layer_norm_eps: f64,
}

impl TextConfig {
    pub fn frontend_parameter_count(&self) -> usize {
        let d = self.hidden_size;
        (self.vocab_size + self.max_positions + self.type_vocab_size) * d + 2 * d
    }

    pub fn parameter_count(&self, layers: usize) -> usize {
        self.frontend_parameter_count() + layers * transformer_layer_count(self.hidden_size, self.intermediate_size)
    }
}

fn transformer_layer_count(d: usize, inter: usize) -> usize {
    let attention = 4 * (d * d + d);
    let ffn = d * inter + inter + inter * d + d;
    attention + ffn + 4 * d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Audio(AudioConfig),
    Text(TextConfig),
}

/// Everything needed to build an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub modality: Modality,
    pub frontend: Frontend,
    pub checkpoint: CheckpointRef,
    pub architecture: Architecture,
    /// Keep only the first layers after loading.
    #[serde(default)]
    pub keep_layers: Option<usize>,
    /// Vocabulary (one word per line) or `tokenizer.json` for text encoders
    /// without a checkpoint tokenizer. Random text encoders default to the
    /// synthetic-corpus lexicon.
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
}

impl EncoderSpec {
    /// Depth of the checkpoint before pruning.
    pub fn checkpoint_layers(&self) -> usize {
        match &self.architecture {
            Architecture::Audio(c) => c.num_layers,
            Architecture::Text(c) => c.num_layers,
        }
    }

    /// Transformer layers after pruning: `L`.
    pub fn num_layers(&self) -> usize {
        self.keep_layers.unwrap_or(self.checkpoint_layers())
    }

    /// `d_A` or `d_T`.
    pub fn hidden_size(&self) -> usize {
        match &self.architecture {
            Architecture::Audio(c) => c.hidden_size,
            Architecture::Text(c) => c.hidden_size,
        }
    }

    /// Parameter count implied by the architecture after pruning.
    pub fn parameter_count(&self) -> usize {
        match &self.architecture {
            Architecture::Audio(c) => c.parameter_count(self.num_layers()),
            Architecture::Text(c) => c.parameter_count(self.num_layers()),
        }
    }

    pub fn frontend_parameter_count(&self) -> usize {
        match &self.architecture {
            Architecture::Audio(c) => c.frontend_parameter_count(),
            Architecture::Text(c) => c.frontend_parameter_count(),
        }
    }

    pub fn with_checkpoint(mut self, checkpoint: CheckpointRef) -> Self {
        self.checkpoint = checkpoint;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (layers, hidden, heads) = match &self.architecture {
            Architecture::Audio(c) => {
                if c.conv_dim.is_empty()
                    || c.conv_dim.len() != c.conv_kernel.len()
                    || c.conv_dim.len() != c.conv_stride.len()
                {
                    return Err(Error::invalid(format!("{}: inconsistent conv layer lists", self.name)));
                }
                if c.hidden_size % c.pos_conv_groups != 0 {
                    return Err(Error::invalid(format!("{}: pos conv groups must divide hidden size", self.name)));
                }
                if self.modality != Modality::Audio || self.frontend != Frontend::Convolutional {
                    return Err(Error::invalid(format!("{}: audio architecture needs a convolutional frontend", self.name)));
                }
                (c.num_layers, c.hidden_size, c.num_heads)
            }
            Architecture::Text(c) => {
                if c.vocab_size == 0 || c.max_positions == 0 {
                    return Err(Error::invalid(format!("{}: empty vocabulary or positions", self.name)));
                }
                if self.modality != Modality::Text || self.frontend != Frontend::TokenEmbedding {
                    return Err(Error::invalid(format!("{}: text architecture needs a token-embedding frontend", self.name)));
                }
                (c.num_layers, c.hidden_size, c.num_heads)
            }
        };
        if layers == 0 || hidden == 0 || heads == 0 || hidden % heads != 0 {
            return Err(Error::invalid(format!(
                "{}: need L >= 1, d >= 1 and heads dividing d (L={layers}, d={hidden}, heads={heads})",
                self.name
            )));
        }
        if let Some(k) = self.keep_layers {
            if k == 0 || k > layers {
                return Err(Error::invalid(format!("{}: cannot keep {k} of {layers} layers", self.name)));
            }
        }
        Ok(())
    }
}

const HUBERT_CONV_DIM: [usize; 7] = [512; 7];
const HUBERT_CONV_KERNEL: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
const HUBERT_CONV_STRIDE: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];

fn hubert_like(layers: usize) -> AudioConfig {
    AudioConfig {
        hidden_size: 768,
        num_layers: layers,
        num_heads: 12,
        intermediate_size: 3072,
        conv_dim: HUBERT_CONV_DIM.to_vec(),
        conv_kernel: HUBERT_CONV_KERNEL.to_vec(),
        conv_stride: HUBERT_CONV_STRIDE.to_vec(),
        conv_bias: false,
        feature_norm: FeatureNorm::Group,
        stable_layer_norm: false,
        pos_conv_kernel: 128,
        pos_conv_groups: 16,
        layer_norm_eps: 1e-5,
    }
}

fn audio_spec(name: &str, checkpoint: CheckpointRef, config: AudioConfig, keep: Option<usize>) -> EncoderSpec {
    EncoderSpec {
        name: name.to_owned(),
        modality: Modality::Audio,
        frontend: Frontend::Convolutional,
        checkpoint,
        architecture: Architecture::Audio(config),
        keep_layers: keep,
        tokenizer: None,
    }
}

fn text_spec(name: &str, checkpoint: CheckpointRef, config: TextConfig) -> EncoderSpec {
    EncoderSpec {
        name: name.to_owned(),
        modality: Modality::Text,
        frontend: Frontend::TokenEmbedding,
        checkpoint,
        architecture: Architecture::Text(config),
        keep_layers: None,
        tokenizer: None,
    }
}

/// Two-layer distilled HuBERT student, `d_A = 768`.
pub fn distilhubert() -> EncoderSpec {
    audio_spec("distilhubert", CheckpointRef::Hub("ntu-spml/distilhubert".into()), hubert_like(2), None)
}

/// HuBERT base: 12 layers, `d_A = 768`.
pub fn hubert_base() -> EncoderSpec {
    audio_spec("hubert-base", CheckpointRef::Hub("facebook/hubert-base-ls960".into()), hubert_like(12), None)
}

/// Robust wav2vec 2.0 large, pruned to its first 12 of 24 layers, `d_A = 1024`.
pub fn w2v2_large_robust_pruned() -> EncoderSpec {
    let config = AudioConfig {
        hidden_size: 1024,
        num_layers: 24,
        num_heads: 16,
        intermediate_size: 4096,
        conv_bias: true,
        feature_norm: FeatureNorm::Layer,
        stable_layer_norm: true,
        ..hubert_like(24)
    };
    audio_spec(
        "w2v2-l-robust-p",
        CheckpointRef::Hub("facebook/wav2vec2-large-robust".into()),
        config,
        Some(12),
    )
}

/// Four-layer general-distillation TinyBERT, `d_T = 312`.
pub fn tinybert() -> EncoderSpec {
    text_spec(
        "tinybert-4l",
        CheckpointRef::Hub("huawei-noah/TinyBERT_General_4L_312D".into()),
        TextConfig {
            vocab_size: 30522,
            hidden_size: 312,
            num_layers: 4,
            num_heads: 12,
            intermediate_size: 1200,
            max_positions: 512,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
        },
    )
}

/// Small random speech encoder: three strided convolutions (80x
/// downsampling) and `layers` transformer layers of width `hidden`.
pub fn tiny_audio(layers: usize, hidden: usize, seed: u64) -> EncoderSpec {
    let config = AudioConfig {
        hidden_size: hidden,
        num_layers: layers,
        num_heads: (hidden / 8).max(1),
        intermediate_size: 4 * hidden,
        conv_dim: vec![32, 32, 32],
        conv_kernel: vec![10, 8, 4],
        conv_stride: vec![5, 4, 4],
        conv_bias: true,
        feature_norm: FeatureNorm::Layer,
        stable_layer_norm: false,
        pos_conv_kernel: 8,
        pos_conv_groups: 4,
        layer_norm_eps: 1e-5,
    };
    audio_spec(&format!("tiny-audio-{layers}x{hidden}"), CheckpointRef::Random { seed }, config, None)
}

/// Small random text encoder. `vocab_size` must match the tokenizer.
pub fn tiny_text(layers: usize, hidden: usize, vocab_size: usize, seed: u64) -> EncoderSpec {
    text_spec(
        &format!("tiny-text-{layers}x{hidden}"),
        CheckpointRef::Random { seed },
        TextConfig {
            vocab_size,
            hidden_size: hidden,
            num_layers: layers,
            num_heads: (hidden / 8).max(1),
            intermediate_size: 4 * hidden,
            max_positions: 64,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
        },
    )
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 12] = [
    "distilhubert",
    "hubert-base",
    "w2v2-l-robust-p",
    "tinybert-4l",
    "tiny-audio-2x16",
    "tiny-audio-2x32",
    "tiny-audio-4x16",
    "tiny-audio-4x32",
    "tiny-text-2x16",
    "tiny-text-2x32",
    "tiny-text-4x16",
    "tiny-text-4x32",
];

/// Looks up a preset by name. Tiny presets use `random(seed)`; tiny text
/// presets size their vocabulary from the synthetic-corpus lexicon.
pub fn preset(name: &str, seed: u64) -> Result<EncoderSpec> {
    let tiny = |rest: &str| -> Option<(usize, usize)> {
        let (l, d) = rest.split_once('x')?;
        let (l, d) = (l.parse().ok()?, d.parse().ok()?);
        ([2, 4].contains(&l) && [16, 32].contains(&d)).then_some((l, d))
    };
    match name {
        "distilhubert" => Ok(distilhubert()),
        "hubert-base" => Ok(hubert_base()),
        "w2v2-l-robust-p" => Ok(w2v2_large_robust_pruned()),
        "tinybert-4l" => Ok(tinybert()),
        _ => {
            if let Some((l, d)) = name.strip_prefix("tiny-audio-").and_then(tiny) {
                return Ok(tiny_audio(l, d, seed));
            }
            if let Some((l, d)) = name.strip_prefix("tiny-text-").and_then(tiny) {
                let vocab = crate::encoders::tokenizer::WhitespaceTokenizer::synthetic_lexicon().vocab_size();
                return Ok(tiny_text(l, d, vocab, seed));
            }
            Err(Error::invalid(format!(
                "unknown encoder preset `{name}` (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    }
}
