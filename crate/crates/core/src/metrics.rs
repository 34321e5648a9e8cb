//! Concordance correlation coefficient, the CCC training objective, and word
//! error rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dimension, EmotionTriple, Partition};

/// Denominator floor below which the CCC is defined as 0.
pub const CCC_DENOMINATOR_GUARD: f64 = 1e-12;

/// Targets and estimates for one dimension, validated to be equally long,
/// nonempty and finite.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVectorPair<'a> {
    targets: &'a [f64],
    estimates: &'a [f64],
}

/// Population (divide-by-N) moments of a [`ScoreVectorPair`], kept as
/// `N`-scaled sums so that the CCC needs a single final division.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMoments {
    pub count: f64,
    pub mean_target: f64,
    pub mean_estimate: f64,
    /// `N^2 var_t`.
    pub scaled_var_target: f64,
    /// `N^2 var_e`.
    pub scaled_var_estimate: f64,
    /// `N^2 cov`.
    pub scaled_covariance: f64,
    /// `N (mean_t - mean_e)`.
    pub scaled_mean_gap: f64,
}

impl PairMoments {
    pub fn var_target(&self) -> f64 {
        self.scaled_var_target / (self.count * self.count)
    }

    pub fn var_estimate(&self) -> f64 {
        self.scaled_var_estimate / (self.count * self.count)
    }

    pub fn covariance(&self) -> f64 {
        self.scaled_covariance / (self.count * self.count)
    }

    pub fn pearson(&self) -> f64 {
        let denom = (self.scaled_var_target * self.scaled_var_estimate).sqrt();
        if denom / (self.count * self.count) < CCC_DENOMINATOR_GUARD {
            0.0
        } else {
            self.scaled_covariance / denom
        }
    }

    pub fn ccc(&self) -> f64 {
        let gap = self.scaled_mean_gap;
        let denom = self.scaled_var_target + self.scaled_var_estimate + gap * gap;
        if denom / (self.count * self.count) < CCC_DENOMINATOR_GUARD {
            return 0.0;
        }
        (2.0 * self.scaled_covariance / denom).clamp(-1.0, 1.0)
    }
}

impl<'a> ScoreVectorPair<'a> {
    pub fn new(targets: &'a [f64], estimates: &'a [f64]) -> Result<Self> {
        if targets.len() != estimates.len() {
            return Err(Error::invalid(format!(
                "length mismatch: {} targets vs {} estimates",
                targets.len(),
                estimates.len()
            )));
        }
        if targets.is_empty() {
            return Err(Error::invalid("empty score vectors"));
        }
        if let Some(v) = targets.iter().chain(estimates).find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite score {v}")));
        }
        Ok(Self { targets, estimates })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &'a [f64] {
        self.targets
    }

    pub fn estimates(&self) -> &'a [f64] {
        self.estimates
    }

    /// Sums of the data shifted by its first element. The shift keeps
    /// the variance accurate for scores clustered far from zero, and inputs
    /// on a coarse grid (e.g. small integers) give exact sums.
    pub fn moments(&self) -> PairMoments {
        let n = self.len() as f64;
        let (kt, ke) = (self.targets[0], self.estimates[0]);
        let (mut st, mut se, mut stt, mut see, mut ste) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&t, &e) in self.targets.iter().zip(self.estimates) {
            let (dt, de) = (t - kt, e - ke);
            st += dt;
            se += de;
            stt += dt * dt;
            see += de * de;
            ste += dt * de;
        }
        PairMoments {
            count: n,
            mean_target: kt + st / n,
            mean_estimate: ke + se / n,
            scaled_var_target: (n * stt - st * st).max(0.0),
            scaled_var_estimate: (n * see - se * se).max(0.0),
            scaled_covariance: n * ste - st * se,
            scaled_mean_gap: st - se + n * (kt - ke),
        }
    }
}

/// Concordance correlation coefficient between targets and estimates.
///
/// `2 cov / (var_t + var_e + (mean_t - mean_e)^2)` with population
/// statistics. Returns 0 when the denominator falls below
/// [`CCC_DENOMINATOR_GUARD`]. Needs at least two scores.
pub fn ccc(targets: &[f64], estimates: &[f64]) -> Result<f64> {
    let pair = ScoreVectorPair::new(targets, estimates)?;
    if pair.len() < 2 {
        return Err(Error::invalid("ccc needs at least two scores"));
    }
    Ok(pair.moments().ccc())
}

/// Pearson correlation with the same validation as [`ccc`].
pub fn pearson(targets: &[f64], estimates: &[f64]) -> Result<f64> {
    let pair = ScoreVectorPair::new(targets, estimates)?;
    if pair.len() < 2 {
        return Err(Error::invalid("pearson needs at least two scores"));
    }
    Ok(pair.moments().pearson())
}

fn column(batch: &[EmotionTriple], dim: Dimension) -> Vec<f64> {
    batch.iter().map(|t| t.get(dim)).collect()
}

/// Per-dimension CCC of a batch of emotion triples, in [`Dimension::ALL`] order.
pub fn ccc_per_dimension(target: &[EmotionTriple], estimate: &[EmotionTriple]) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for dim in Dimension::ALL {
        out[dim.index()] = ccc(&column(target, dim), &column(estimate, dim))?;
    }
    Ok(out)
}

/// Training objective: `1 - mean_dim ccc(target_dim, estimate_dim)`, in `[0, 2]`.
pub fn ccc_loss(target: &[EmotionTriple], estimate: &[EmotionTriple]) -> Result<f64> {
    let per_dim = ccc_per_dimension(target, estimate)?;
    Ok(1.0 - per_dim.iter().sum::<f64>() / 3.0)
}

/// Dataset-level CCC scores for one evaluated partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CccReport {
    pub partition: Partition,
    pub per_dimension: BTreeMap<Dimension, f64>,
    pub mean_ccc: f64,
}

impl CccReport {
    pub fn from_scores(partition: Partition, scores: [f64; 3]) -> Self {
        let per_dimension = Dimension::ALL
            .iter()
            .map(|&d| (d, scores[d.index()]))
            .collect();
        Self {
            partition,
            per_dimension,
            mean_ccc: scores.iter().sum::<f64>() / 3.0,
        }
    }

    /// Scores the full partition at once (not an average of batch CCCs).
    pub fn from_predictions(
        partition: Partition,
        target: &[EmotionTriple],
        estimate: &[EmotionTriple],
    ) -> Result<Self> {
        Ok(Self::from_scores(partition, ccc_per_dimension(target, estimate)?))
    }

    pub fn get(&self, dim: Dimension) -> f64 {
        self.per_dimension.get(&dim).copied().unwrap_or(f64::NAN)
    }

    pub fn scores(&self) -> [f64; 3] {
        Dimension::ALL.map(|d| self.get(d))
    }
}

/// Word error rate with the edit counts of one optimal alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    pub wer: f64,
}

impl WerResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn from_counts(substitutions: usize, deletions: usize, insertions: usize, reference_words: usize) -> Self {
        Self {
            substitutions,
            deletions,
            insertions,
            reference_words,
            wer: (substitutions + deletions + insertions) as f64 / reference_words as f64,
        }
    }

    /// Corpus-level WER: pooled error counts over pooled reference length.
    pub fn aggregate<'a>(results: impl IntoIterator<Item = &'a WerResult>) -> Result<Self> {
        let (mut s, mut d, mut i, mut n) = (0, 0, 0, 0);
        for r in results {
            s += r.substitutions;
            d += r.deletions;
            i += r.insertions;
            n += r.reference_words;
        }
        if n == 0 {
            return Err(Error::invalid("no reference words to aggregate"));
        }
        Ok(Self::from_counts(s, d, i, n))
    }
}

/// Lower-cases, drops punctuation and splits on whitespace.
pub fn normalize_text(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punctuation(*c))
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

fn is_unicode_punctuation(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00A1}' | '\u{00BF}' | '\u{00AB}' | '\u{00BB}')
}

/// WER between two transcripts after [`normalize_text`] on both sides.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerResult> {
    wer_tokens(&normalize_text(reference), &normalize_text(hypothesis))
}

/// Unit-cost Levenshtein alignment of word sequences.
///
/// The backtrace prefers the diagonal (match or substitution), then deletion,
/// then insertion, so S/D/I counts are reproducible when several optimal
/// alignments exist.
pub fn wer_tokens<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<WerResult> {
    if reference.is_empty() {
        return Err(Error::invalid("empty reference transcript"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let width = m + 1;
    let mut dist = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        dist[i * width] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = dist[(i - 1) * width + j - 1] + usize::from(!same);
            let del = dist[(i - 1) * width + j] + 1;
            let ins = dist[i * width + j - 1] + 1;
            dist[i * width + j] = diag.min(del).min(ins);
        }
    }

    let (mut s, mut d, mut ins) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * width + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if dist[(i - 1) * width + j - 1] + usize::from(!same) == here {
                s += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[(i - 1) * width + j] + 1 == here {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerResult::from_counts(s, d, ins, n))
}
