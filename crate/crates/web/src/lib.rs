//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function takes free text from a form field and returns a
//! JSON string; errors come back as a plain message. The typed functions
//! underneath are what the native tests exercise.

use serde::Serialize;
use ser_core::corpus::{plan_buckets_by_length, random_grouping};
use ser_core::layers::{argmax, layer_weights};
use ser_core::metrics::ScoreVectorPair;
use wasm_bindgen::prelude::*;

/// Parses numbers separated by commas, semicolons or whitespace.
pub fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementSummary {
    pub n: usize,
    pub ccc: f64,
    pub pearson: f64,
    pub mean_target: f64,
    pub mean_estimate: f64,
    pub var_target: f64,
    pub var_estimate: f64,
}

pub fn agreement(targets: &[f64], estimates: &[f64]) -> Result<AgreementSummary, String> {
    let pair = ScoreVectorPair::new(targets, estimates).map_err(|e| e.to_string())?;
    let m = pair.moments();
    Ok(AgreementSummary {
        n: pair.len(),
        ccc: m.ccc(),
        pearson: m.pearson(),
        mean_target: m.mean_target,
        mean_estimate: m.mean_estimate,
        var_target: m.var_target(),
        var_estimate: m.var_estimate(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub weights: Vec<f64>,
    pub peak: usize,
}

pub fn layer_profile(logits: &[f64]) -> Result<LayerProfile, String> {
    let weights = layer_weights(logits).map_err(|e| e.to_string())?;
    let peak = argmax(&weights).unwrap_or(0);
    Ok(LayerProfile { weights, peak })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PaddingComparison {
    pub batches: usize,
    pub bucketed_padding: f64,
    pub random_padding: f64,
    /// Batch lengths under bucketing, in training order.
    pub bucketed_lengths: Vec<Vec<usize>>,
}

/// Padding of length-sorted batches against a random grouping of the same
/// utterance lengths.
pub fn padding_comparison(lengths: &[usize], batch_size: usize, seed: u64) -> Result<PaddingComparison, String> {
    let items: Vec<(String, usize)> = lengths.iter().enumerate().map(|(i, &l)| (i.to_string(), l)).collect();
    let bucketed = plan_buckets_by_length(&items, batch_size, seed).map_err(|e| e.to_string())?;
    let random = random_grouping(&items, batch_size, seed).map_err(|e| e.to_string())?;
    let bucketed_lengths = bucketed
        .batches
        .iter()
        .map(|b| b.iter().map(|id| lengths[id.parse::<usize>().expect("ids are indices")]).collect())
        .collect();
    Ok(PaddingComparison {
        batches: bucketed.batches.len(),
        bucketed_padding: bucketed.padding_ratio,
        random_padding: random.padding_ratio,
        bucketed_lengths,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn ccc_json(targets: &str, estimates: &str) -> Result<String, String> {
    to_json(&agreement(&parse_numbers(targets)?, &parse_numbers(estimates)?)?)
}

#[wasm_bindgen]
pub fn layer_weights_json(logits: &str) -> Result<String, String> {
    to_json(&layer_profile(&parse_numbers(logits)?)?)
}

#[wasm_bindgen]
pub fn padding_json(lengths: &str, batch_size: u32, seed: u32) -> Result<String, String> {
    let lengths = parse_numbers(lengths)?
        .into_iter()
        .map(|v| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(format!("lengths must be positive integers, got {v}"))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    to_json(&padding_comparison(&lengths, batch_size as usize, u64::from(seed))?)
}
