//! Locating pretrained checkpoints on disk and reading their config.
//!
//! Nothing is downloaded. Hub ids are looked up under `$SER_MODEL_CACHE/<org>/<name>`
//! and then in the standard Hugging Face cache (`$HF_HOME/hub`, default
//! `~/.cache/huggingface/hub`).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde_json::Value;

use super::spec::{Architecture, AudioConfig, CheckpointRef, FeatureNorm, TextConfig};
use crate::error::{Error, Result};

pub const CACHE_ENV: &str = "SER_MODEL_CACHE";

/// Directory holding the checkpoint's `config.json`.
pub fn resolve_checkpoint(checkpoint: &CheckpointRef) -> Result<PathBuf> {
    match checkpoint {
        CheckpointRef::Random { .. } => Err(Error::checkpoint("random(seed) has no files to resolve")),
        CheckpointRef::Local(dir) => {
            if dir.join("config.json").is_file() {
                Ok(dir.clone())
            } else {
                Err(Error::checkpoint(format!("{}: no config.json", dir.display())))
            }
        }
        CheckpointRef::Hub(repo) => {
            let mut tried = Vec::new();
            if let Some(root) = std::env::var_os(CACHE_ENV) {
                let dir = Path::new(&root).join(repo);
                if dir.join("config.json").is_file() {
                    return Ok(dir);
                }
                tried.push(dir);
            }
            if let Some(hub) = hf_hub_dir() {
                let snapshots = hub.join(format!("models--{}", repo.replace('/', "--"))).join("snapshots");
                if let Ok(entries) = std::fs::read_dir(&snapshots) {
                    let mut dirs: Vec<PathBuf> = entries
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.join("config.json").is_file())
                        .collect();
                    dirs.sort();
                    if let Some(dir) = dirs.pop() {
                        return Ok(dir);
                    }
                }
                tried.push(snapshots);
            }
            let tried: Vec<String> = tried.iter().map(|p| p.display().to_string()).collect();
            Err(Error::checkpoint(format!(
                "cannot resolve hf:{repo}; looked in [{}]. Download the checkpoint and set {CACHE_ENV}",
                tried.join(", ")
            )))
        }
    }
}

fn hf_hub_dir() -> Option<PathBuf> {
    if let Some(home) = std::env::var_os("HF_HOME") {
        return Some(Path::new(&home).join("hub"));
    }
    std::env::var_os("HOME").map(|h| Path::new(&h).join(".cache/huggingface/hub"))
}

/// Every tensor in `model.safetensors` or, failing that, `pytorch_model.bin`.
pub fn read_tensors(dir: &Path) -> Result<HashMap<String, Tensor>> {
    let st = dir.join("model.safetensors");
    if st.is_file() {
        return Ok(candle_core::safetensors::load(&st, &Device::Cpu)?);
    }
    let bin = dir.join("pytorch_model.bin");
    if bin.is_file() {
        return Ok(candle_core::pickle::read_all(&bin)?.into_iter().collect());
    }
    Err(Error::checkpoint(format!(
        "{}: no model.safetensors or pytorch_model.bin",
        dir.display()
    )))
}

fn field<'a>(config: &'a Value, key: &str) -> Result<&'a Value> {
    config
        .get(key)
        .ok_or_else(|| Error::checkpoint(format!("config.json lacks `{key}`")))
}

fn usize_field(config: &Value, key: &str) -> Result<usize> {
    field(config, key)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::checkpoint(format!("config.json `{key}` is not an integer")))
}

fn usize_list(config: &Value, key: &str) -> Result<Vec<usize>> {
    field(config, key)?
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_u64().map(|v| v as usize)).collect())
        .ok_or_else(|| Error::checkpoint(format!("config.json `{key}` is not an integer list")))
}

/// Architecture described by a Hugging Face `config.json`.
pub fn architecture_from_config(config: &Value) -> Result<Architecture> {
    let eps = |default| config.get("layer_norm_eps").and_then(Value::as_f64).unwrap_or(default);
    if config.get("conv_dim").is_some() {
        let feature_norm = match config.get("feat_extract_norm").and_then(Value::as_str).unwrap_or("group") {
            "group" => FeatureNorm::Group,
            "layer" => FeatureNorm::Layer,
            other => return Err(Error::checkpoint(format!("unsupported feat_extract_norm `{other}`"))),
        };
        Ok(Architecture::Audio(AudioConfig {
            hidden_size: usize_field(config, "hidden_size")?,
            num_layers: usize_field(config, "num_hidden_layers")?,
            num_heads: usize_field(config, "num_attention_heads")?,
            intermediate_size: usize_field(config, "intermediate_size")?,
            conv_dim: usize_list(config, "conv_dim")?,
            conv_kernel: usize_list(config, "conv_kernel")?,
            conv_stride: usize_list(config, "conv_stride")?,
            conv_bias: config.get("conv_bias").and_then(Value::as_bool).unwrap_or(false),
            feature_norm,
            stable_layer_norm: config.get("do_stable_layer_norm").and_then(Value::as_bool).unwrap_or(false),
            pos_conv_kernel: usize_field(config, "num_conv_pos_embeddings")?,
            pos_conv_groups: usize_field(config, "num_conv_pos_embedding_groups")?,
            layer_norm_eps: eps(1e-5),
        }))
    } else if config.get("vocab_size").is_some() {
        Ok(Architecture::Text(TextConfig {
            vocab_size: usize_field(config, "vocab_size")?,
            hidden_size: usize_field(config, "hidden_size")?,
            num_layers: usize_field(config, "num_hidden_layers")?,
            num_heads: usize_field(config, "num_attention_heads")?,
            intermediate_size: usize_field(config, "intermediate_size")?,
            max_positions: usize_field(config, "max_position_embeddings")?,
            type_vocab_size: config.get("type_vocab_size").and_then(Value::as_u64).unwrap_or(2) as usize,
            layer_norm_eps: eps(1e-12),
        }))
    } else {
        Err(Error::checkpoint("config.json describes neither a speech nor a BERT-style encoder"))
    }
}

pub fn read_architecture(dir: &Path) -> Result<Architecture> {
    let text = std::fs::read_to_string(dir.join("config.json"))?;
    architecture_from_config(&serde_json::from_str(&text)?)
}

/// Compares the shape-relevant fields of a checkpoint with the expected
/// architecture; epsilons may differ.
pub fn check_architecture(expected: &Architecture, found: &Architecture) -> Result<()> {
    let mismatch = |what: &str, e: &dyn std::fmt::Debug, f: &dyn std::fmt::Debug| {
        Err(Error::checkpoint(format!("dimension mismatch: {what} expected {e:?}, checkpoint has {f:?}")))
    };
    match (expected, found) {
        (Architecture::Audio(e), Architecture::Audio(f)) => {
            let pairs: [(&str, &dyn std::fmt::Debug, &dyn std::fmt::Debug, bool); 7] = [
                ("hidden_size", &e.hidden_size, &f.hidden_size, e.hidden_size == f.hidden_size),
                ("num_layers", &e.num_layers, &f.num_layers, e.num_layers == f.num_layers),
                ("num_heads", &e.num_heads, &f.num_heads, e.num_heads == f.num_heads),
                ("intermediate_size", &e.intermediate_size, &f.intermediate_size, e.intermediate_size == f.intermediate_size),
                ("conv_dim", &e.conv_dim, &f.conv_dim, e.conv_dim == f.conv_dim),
                ("stable_layer_norm", &e.stable_layer_norm, &f.stable_layer_norm, e.stable_layer_norm == f.stable_layer_norm),
                ("feature_norm", &e.feature_norm, &f.feature_norm, e.feature_norm == f.feature_norm),
            ];
            for (what, a, b, ok) in pairs {
                if !ok {
                    return mismatch(what, a, b);
                }
            }
            Ok(())
        }
        (Architecture::Text(e), Architecture::Text(f)) => {
            let pairs: [(&str, usize, usize); 5] = [
                ("hidden_size", e.hidden_size, f.hidden_size),
                ("num_layers", e.num_layers, f.num_layers),
                ("num_heads", e.num_heads, f.num_heads),
                ("intermediate_size", e.intermediate_size, f.intermediate_size),
                ("vocab_size", e.vocab_size, f.vocab_size),
            ];
            for (what, a, b) in pairs {
                if a != b {
                    return mismatch(what, &a, &b);
                }
            }
            Ok(())
        }
        _ => Err(Error::checkpoint("checkpoint modality differs from the encoder spec")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::spec;

    fn distilhubert_config() -> Value {
        serde_json::json!({
            "conv_bias": false,
            "conv_dim": [512, 512, 512, 512, 512, 512, 512],
            "conv_kernel": [10, 3, 3, 3, 3, 2, 2],
            "conv_stride": [5, 2, 2, 2, 2, 2, 2],
            "do_stable_layer_norm": false,
            "feat_extract_norm": "group",
            "hidden_size": 768,
            "intermediate_size": 3072,
            "layer_norm_eps": 1e-5,
            "num_attention_heads": 12,
            "num_conv_pos_embedding_groups": 16,
            "num_conv_pos_embeddings": 128,
            "num_hidden_layers": 2
        })
    }

    #[test]
    fn parses_speech_config() {
        let arch = architecture_from_config(&distilhubert_config()).unwrap();
        assert_eq!(arch, spec::distilhubert().architecture);
    }

    #[test]
    fn parses_bert_config() {
        let config = serde_json::json!({
            "hidden_size": 312, "intermediate_size": 1200, "max_position_embeddings": 512,
            "num_attention_heads": 12, "num_hidden_layers": 4, "type_vocab_size": 2, "vocab_size": 30522
        });
        let arch = architecture_from_config(&config).unwrap();
        assert_eq!(arch, spec::tinybert().architecture);
    }

    #[test]
    fn mismatched_depth_is_reported() {
        let found = architecture_from_config(&distilhubert_config()).unwrap();
        let err = check_architecture(&spec::hubert_base().architecture, &found).unwrap_err();
        assert!(err.to_string().contains("num_layers"), "{err}");
    }

    #[test]
    fn unresolvable_hub_id_names_env_var() {
        let err = resolve_checkpoint(&CheckpointRef::Hub("nobody/nothing-here".into())).unwrap_err();
        assert!(err.to_string().contains(CACHE_ENV));
    }
}
