//! Synthetic corpus with a known split of information between modalities.
//!
//! * Arousal is the RMS amplitude of the waveform.
//! * Dominance sets the fundamental frequency, `100 + 200 * dominance` Hz.
//! * Valence only appears in the transcript, as a sentiment keyword whose
//!   polarity index is `round(4 * valence)`.
//!
//! Labels are drawn independently, so valence cannot be recovered from audio.
//! The unseen-scenario partition (`test2`) uses sentence templates that never
//! occur in the other partitions.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{normalize_label, UtteranceRecord, RAW_LABEL_MAX, RAW_LABEL_MIN};
use crate::error::{Error, Result};
use crate::types::{EmotionTriple, Partition};

/// Smallest corpus that still gives every partition a few items.
pub const MIN_CORPUS_SIZE: usize = 40;

/// Sentiment keywords by polarity index, most negative first.
pub const KEYWORDS: [[&str; 3]; 5] = [
    ["terrible", "awful", "horrible"],
    ["bad", "poor", "disappointing"],
    ["okay", "fine", "average"],
    ["good", "nice", "pleasant"],
    ["great", "wonderful", "excellent"],
];

/// Templates for train, development and test1. `{}` is the keyword slot.
pub const SEEN_TEMPLATES: [&str; 8] = [
    "i think the show was {} today",
    "honestly my week has been {}",
    "the food at that place is {}",
    "well it all turned out {} in the end",
    "we had a {} time with the kids",
    "that interview went {} for me",
    "so yeah the weather is {} here",
    "my new job feels {} so far",
];

/// Templates reserved for test2.
pub const HELD_OUT_TEMPLATES: [&str; 3] = [
    "to be fair the movie looked {}",
    "last night the concert felt {}",
    "our trip to the coast was {}",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub min_duration_secs: f64,
    pub max_duration_secs: f64,
    /// Standard deviation of the additive noise relative to the unit sine,
    /// before the whole signal is scaled to the target RMS.
    pub noise_level: f64,
}

impl SyntheticConfig {
    pub fn new(n: usize, seed: u64, sample_rate: u32) -> Self {
        Self {
            n,
            seed,
            sample_rate,
            min_duration_secs: 0.25,
            max_duration_secs: 0.5,
            noise_level: 0.3,
        }
    }

    pub fn generate(&self) -> Result<Vec<UtteranceRecord>> {
        if self.n < MIN_CORPUS_SIZE {
            return Err(Error::invalid(format!(
                "synthetic corpus needs at least {MIN_CORPUS_SIZE} items, got {}",
                self.n
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if !(self.min_duration_secs > 0.0 && self.max_duration_secs >= self.min_duration_secs) {
            return Err(Error::invalid("invalid duration range"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let partitions = assign_partitions(self.n, &mut rng);
        let width = self.n.to_string().len();
        partitions
            .into_iter()
            .enumerate()
            .map(|(i, partition)| self.make_record(format!("syn{i:0width$}"), partition, &mut rng))
            .collect()
    }

    fn make_record(&self, id: String, partition: Partition, rng: &mut ChaCha8Rng) -> Result<UtteranceRecord> {
        let mut raw_label = || {
            let u: f64 = rng.random();
            // Two decimals, like averaged annotator ratings.
            let raw = ((RAW_LABEL_MIN + u * (RAW_LABEL_MAX - RAW_LABEL_MIN)) * 100.0).round() / 100.0;
            normalize_label(raw)
        };
        let labels = EmotionTriple::new(raw_label()?, raw_label()?, raw_label()?);

        let templates: &[&str] = if partition == Partition::Test2 {
            &HELD_OUT_TEMPLATES
        } else {
            &SEEN_TEMPLATES
        };
        let template = templates.choose(rng).expect("templates are nonempty");
        let keyword = KEYWORDS[polarity_index(labels.valence)]
            .choose(rng)
            .expect("keywords are nonempty");
        let transcript = template.replace("{}", keyword);

        let duration = rng.random_range(self.min_duration_secs..=self.max_duration_secs);
        let len = ((duration * self.sample_rate as f64).round() as usize).max(1);
        let audio = tone(
            len,
            self.sample_rate,
            100.0 + 200.0 * labels.dominance,
            labels.arousal,
            self.noise_level,
            rng,
        );
        Ok(UtteranceRecord {
            id,
            audio,
            sample_rate: self.sample_rate,
            transcript,
            labels,
            partition,
        })
    }
}

/// Default synthetic corpus: 0.25 to 0.5 s utterances.
pub fn generate_synthetic_corpus(n: usize, seed: u64, sample_rate: u32) -> Result<Vec<UtteranceRecord>> {
    SyntheticConfig::new(n, seed, sample_rate).generate()
}

/// Valence quantized to the five keyword polarity levels.
pub fn polarity_index(valence: f64) -> usize {
    (valence.clamp(0.0, 1.0) * 4.0).round() as usize
}

/// Polarity index of a sentiment keyword, `None` for filler words.
pub fn keyword_polarity(word: &str) -> Option<usize> {
    KEYWORDS.iter().position(|level| level.contains(&word))
}

pub fn is_sentiment_keyword(word: &str) -> bool {
    keyword_polarity(word).is_some()
}

/// Every word the generator can emit, sorted.
pub fn lexicon() -> Vec<String> {
    let mut words = BTreeSet::new();
    for template in SEEN_TEMPLATES.iter().chain(&HELD_OUT_TEMPLATES) {
        words.extend(template.split_whitespace().filter(|w| *w != "{}").map(str::to_owned));
    }
    words.extend(KEYWORDS.iter().flatten().map(|w| (*w).to_owned()));
    words.into_iter().collect()
}

fn assign_partitions(n: usize, rng: &mut ChaCha8Rng) -> Vec<Partition> {
    let train = n * 7 / 10;
    let dev = n / 10;
    let test1 = n / 10;
    let mut parts = Vec::with_capacity(n);
    parts.extend(std::iter::repeat_n(Partition::Train, train));
    parts.extend(std::iter::repeat_n(Partition::Development, dev));
    parts.extend(std::iter::repeat_n(Partition::Test1, test1));
    parts.extend(std::iter::repeat_n(Partition::Test2, n - train - dev - test1));
    parts.shuffle(rng);
    parts
}

fn tone(len: usize, sample_rate: u32, f0: f64, rms: f64, noise_level: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let phase: f64 = rng.random_range(0.0..TAU);
    let raw: Vec<f64> = (0..len)
        .map(|t| {
            let noise: f64 = rng.sample(StandardNormal);
            (TAU * f0 * t as f64 / sample_rate as f64 + phase).sin() + noise_level * noise
        })
        .collect();
    let current = (raw.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    let gain = if current > 0.0 { rms / current } else { 0.0 };
    raw.into_iter().map(|v| (v * gain) as f32).collect()
}
