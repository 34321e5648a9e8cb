//! Corpus records, label normalization, manifests, length-bucketed batching
//! and the synthetic desk-scale corpus.

mod buckets;
mod manifest;
pub mod synthetic;
pub mod wav;

pub use buckets::{plan_buckets, plan_buckets_by_length, random_grouping, BucketPlan};
pub use manifest::{load_manifest, save_manifest, MANIFEST_HEADER};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig};

use crate::error::{Error, Result};
use crate::types::{EmotionTriple, Partition};

/// Lowest value of the raw annotation scale.
pub const RAW_LABEL_MIN: f64 = 1.0;
/// Highest value of the raw annotation scale.
pub const RAW_LABEL_MAX: f64 = 7.0;
/// Sample rate every loaded utterance is brought to.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// One corpus item.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    /// Single-channel samples.
    pub audio: Vec<f32>,
    pub sample_rate: u32,
    pub transcript: String,
    pub labels: EmotionTriple,
    pub partition: Partition,
}

impl UtteranceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("empty utterance id"));
        }
        if self.audio.is_empty() {
            return Err(Error::invalid(format!("{}: empty audio", self.id)));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid(format!("{}: zero sample rate", self.id)));
        }
        EmotionTriple::normalized(self.labels.arousal, self.labels.valence, self.labels.dominance)
            .map_err(|e| Error::invalid(format!("{}: {e}", self.id)))?;
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.audio.len()
    }

    pub fn duration_secs(&self) -> f64 {
        self.audio.len() as f64 / self.sample_rate as f64
    }

    /// Root-mean-square amplitude of the waveform.
    pub fn rms(&self) -> f64 {
        let sum: f64 = self.audio.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
        (sum / self.audio.len().max(1) as f64).sqrt()
    }
}

/// Maps a rating on the 1 to 7 annotation scale to `[0, 1]` via `(raw - 1) / 6`.
pub fn normalize_label(raw: f64) -> Result<f64> {
    if !raw.is_finite() || !(RAW_LABEL_MIN..=RAW_LABEL_MAX).contains(&raw) {
        return Err(Error::invalid(format!(
            "raw label {raw} outside [{RAW_LABEL_MIN}, {RAW_LABEL_MAX}]"
        )));
    }
    Ok((raw - RAW_LABEL_MIN) / (RAW_LABEL_MAX - RAW_LABEL_MIN))
}

/// Inverse of [`normalize_label`].
///
/// Searches a few ulps around `1 + 6y` for a raw value that normalizes back
/// to exactly `normalized`, so labels that came from a manifest survive a
/// save/load cycle bit for bit. Falls back to the plain affine inverse.
pub fn denormalize_label(normalized: f64) -> Result<f64> {
    if !normalized.is_finite() || !(0.0..=1.0).contains(&normalized) {
        return Err(Error::invalid(format!("normalized label {normalized} outside [0, 1]")));
    }
    let guess = RAW_LABEL_MIN + normalized * (RAW_LABEL_MAX - RAW_LABEL_MIN);
    let mut down = guess;
    let mut up = guess;
    for _ in 0..16 {
        for candidate in [down, up] {
            if (RAW_LABEL_MIN..=RAW_LABEL_MAX).contains(&candidate)
                && normalize_label(candidate)? == normalized
            {
                return Ok(candidate);
            }
        }
        down = down.next_down();
        up = up.next_up();
    }
    Ok(guess.clamp(RAW_LABEL_MIN, RAW_LABEL_MAX))
}

/// Records belonging to one partition, in corpus order.
pub fn partition_records(records: &[UtteranceRecord], partition: Partition) -> Vec<&UtteranceRecord> {
    records.iter().filter(|r| r.partition == partition).collect()
}
