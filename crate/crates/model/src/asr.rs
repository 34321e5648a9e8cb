//! Machine transcription of a corpus and the transcript-quality study.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ser_core::corpus::synthetic::is_sentiment_keyword;
use ser_core::corpus::wav::write_wav;
use ser_core::corpus::UtteranceRecord;
use ser_core::metrics::{normalize_text, wer, CccReport, WerResult};
use ser_core::Partition;

use crate::error::{Error, Result};
use crate::model::{SerModel, SerModelConfig};
use crate::params::fnv1a;
use crate::trainer::{evaluate, train, Regime, TrainConfig};

/// Speech-to-text system: mono samples at `sample_rate` in, text out.
pub trait Transcriber: Sync {
    fn name(&self) -> &str;

    /// Run-level readiness check, called once before any utterance.
    fn check_available(&self) -> Result<()> {
        Ok(())
    }

    fn transcribe(&self, samples: &[f32], sample_rate: u32) -> Result<String>;
}

/// How a [`LookupTranscriber`] derives its output from the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distortion {
    /// Echoes the reference.
    Identity,
    /// Keeps words 1, 3, 5, ... of the normalized reference.
    DropEverySecondWord,
    /// Permutes non-keyword words among their own positions; sentiment
    /// keywords keep their place.
    ShuffleFillers { seed: u64 },
}

fn audio_key(samples: &[f32], sample_rate: u32) -> u64 {
    fnv1a(samples.iter().flat_map(|s| s.to_le_bytes()), u64::from(sample_rate))
}

/// Deterministic stand-in for an ASR system: recognizes the audio of known
/// records and returns a distorted version of their transcript.
#[derive(Debug, Clone)]
pub struct LookupTranscriber {
    name: String,
    distortion: Distortion,
    references: HashMap<u64, String>,
}

impl LookupTranscriber {
    pub fn new(records: &[UtteranceRecord], distortion: Distortion) -> Self {
        let name = match distortion {
            Distortion::Identity => "identity".to_owned(),
            Distortion::DropEverySecondWord => "drop-every-second-word".to_owned(),
            Distortion::ShuffleFillers { seed } => format!("shuffle-fillers({seed})"),
        };
        let references = records
            .iter()
            .map(|r| (audio_key(&r.audio, r.sample_rate), r.transcript.clone()))
            .collect();
        Self { name, distortion, references }
    }

    pub fn distort(&self, reference: &str) -> String {
        let words = normalize_text(reference);
        match self.distortion {
            Distortion::Identity => reference.to_owned(),
            Distortion::DropEverySecondWord => words.iter().step_by(2).cloned().collect::<Vec<_>>().join(" "),
            Distortion::ShuffleFillers { seed } => {
                let slots: Vec<usize> = (0..words.len()).filter(|&i| !is_sentiment_keyword(&words[i])).collect();
                let mut fillers: Vec<&String> = slots.iter().map(|&i| &words[i]).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(reference.bytes(), seed));
                fillers.shuffle(&mut rng);
                let mut out = words.clone();
                for (&slot, word) in slots.iter().zip(fillers) {
                    out[slot] = word.clone();
                }
                out.join(" ")
            }
        }
    }
}

impl Transcriber for LookupTranscriber {
    fn name(&self) -> &str {
        &self.name
    }

    fn transcribe(&self, samples: &[f32], sample_rate: u32) -> Result<String> {
        let reference = self
            .references
            .get(&audio_key(samples, sample_rate))
            .ok_or_else(|| Error::invalid("audio not known to the lookup transcriber"))?;
        Ok(self.distort(reference))
    }
}

/// Runs `program args... <wav>` per utterance and reads the hypothesis from
/// stdout. The WAV is 32-bit float mono at the record's rate.
#[derive(Debug, Clone)]
pub struct CommandTranscriber {
    pub name: String,
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CommandTranscriber {
    pub fn new(name: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self { name: name.into(), program: program.into(), args }
    }
}

impl Transcriber for CommandTranscriber {
    fn name(&self) -> &str {
        &self.name
    }

    fn check_available(&self) -> Result<()> {
        let found = if self.program.components().count() > 1 {
            self.program.is_file()
        } else {
            std::env::var_os("PATH")
                .is_some_and(|paths| std::env::split_paths(&paths).any(|d| d.join(&self.program).is_file()))
        };
        if found {
            Ok(())
        } else {
            Err(Error::TranscriberUnavailable(format!("{}: {} not found", self.name, self.program.display())))
        }
    }

    fn transcribe(&self, samples: &[f32], sample_rate: u32) -> Result<String> {
        let dir = tempfile::tempdir()?;
        let wav = dir.path().join("utterance.wav");
        write_wav(&wav, samples, sample_rate)?;
        let output = Command::new(&self.program).args(&self.args).arg(&wav).output()?;
        if !output.status.success() {
            return Err(Error::invalid(format!(
                "{} exited with {}: {}",
                self.name,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&output.stdout).trim().to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Human,
    Asr,
}

/// Origin of the transcripts a model is trained and tested on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptionSource {
    pub kind: SourceKind,
    pub system_name: Option<String>,
    /// Parameter count as published, for display only.
    pub params_reported: Option<u64>,
}

impl TranscriptionSource {
    pub fn human() -> Self {
        Self { kind: SourceKind::Human, system_name: None, params_reported: None }
    }

    pub fn asr(system_name: impl Into<String>, params_reported: Option<u64>) -> Self {
        Self { kind: SourceKind::Asr, system_name: Some(system_name.into()), params_reported }
    }

    /// `openai/whisper-base`.
    pub fn whisper_base() -> Self {
        Self::asr("Whisper base", Some(74_000_000))
    }

    /// `openai/whisper-tiny`.
    pub fn whisper_tiny() -> Self {
        Self::asr("Whisper tiny", Some(39_000_000))
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.system_name) {
            (SourceKind::Human, None) | (SourceKind::Asr, Some(_)) => Ok(()),
            (SourceKind::Human, Some(_)) => Err(Error::invalid("human transcripts have no system name")),
            (SourceKind::Asr, None) => Err(Error::invalid("ASR source needs a system name")),
        }
    }
}

impl fmt::Display for TranscriptionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.system_name, self.params_reported) {
            (None, _) => f.write_str("Human"),
            (Some(name), Some(p)) => write!(f, "{name} ({}M)", (p as f64 / 1e6).round()),
            (Some(name), None) => f.write_str(name),
        }
    }
}

/// One utterance's machine transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub hypothesis: String,
    /// Why transcription failed; the hypothesis is then empty.
    pub error: Option<String>,
}

/// Corpus with machine transcripts; the human ones are kept for scoring.
#[derive(Debug, Clone)]
pub struct Transcription {
    pub system: String,
    pub records: Vec<UtteranceRecord>,
    pub references: HashMap<String, String>,
    /// In record order.
    pub hypotheses: Vec<Hypothesis>,
}

impl Transcription {
    pub fn failures(&self) -> usize {
        self.hypotheses.iter().filter(|h| h.error.is_some()).count()
    }

    /// Pooled WER over the records of `partition` (all records if `None`).
    pub fn wer(&self, partition: Option<Partition>) -> Result<WerResult> {
        let results = self
            .records
            .iter()
            .filter(|r| partition.is_none_or(|p| r.partition == p))
            .map(|r| wer(&self.references[&r.id], &r.transcript))
            .collect::<ser_core::Result<Vec<_>>>()?;
        Ok(WerResult::aggregate(&results)?)
    }

    /// CSV with columns `id,hypothesis`.
    pub fn write_hypotheses(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
        writer.write_record(["id", "hypothesis"]).map_err(csv_error)?;
        for h in &self.hypotheses {
            writer.write_record([&h.id, &h.hypothesis]).map_err(csv_error)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Reads an `id,hypothesis` file into a map.
pub fn read_hypotheses(path: &Path) -> Result<HashMap<String, String>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    reader
        .records()
        .map(|row| {
            let row = row.map_err(csv_error)?;
            Ok((row.get(0).unwrap_or_default().to_owned(), row.get(1).unwrap_or_default().to_owned()))
        })
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::invalid(format!("hypotheses file: {e}"))
}

/// Replaces every transcript with `asr`'s hypothesis. Utterances are
/// transcribed on parallel threads; a failing utterance gets an empty
/// hypothesis and a logged warning.
pub fn transcribe_corpus(records: &[UtteranceRecord], asr: &dyn Transcriber) -> Result<Transcription> {
    asr.check_available()?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(records.len().max(1));
    let chunk = records.len().div_ceil(threads).max(1);
    let results: Vec<Result<String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|r| asr.transcribe(&r.audio, r.sample_rate)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("transcriber thread panicked")).collect()
    });

    let mut out = records.to_vec();
    let mut hypotheses = Vec::with_capacity(records.len());
    for (record, result) in out.iter_mut().zip(results) {
        let (hypothesis, error) = match result {
            Ok(text) => (text, None),
            Err(e) => {
                log::warn!("{}: transcription of {} failed: {e}", asr.name(), record.id);
                (String::new(), Some(e.to_string()))
            }
        };
        record.transcript = hypothesis.clone();
        hypotheses.push(Hypothesis { id: record.id.clone(), hypothesis, error });
    }
    let references = records.iter().map(|r| (r.id.clone(), r.transcript.clone())).collect();
    Ok(Transcription { system: asr.name().to_owned(), records: out, references, hypotheses })
}

/// One transcript source of a study; `transcriber` is `None` exactly for
/// the human source.
pub struct StudyArm<'a> {
    pub source: TranscriptionSource,
    pub transcriber: Option<&'a dyn Transcriber>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub source: TranscriptionSource,
    /// `None` for human transcripts.
    pub wer: Option<f64>,
    pub report: CccReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub partition: Partition,
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    /// Markdown table: transcription method, WER, then CCC per dimension.
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "Partition: {}\n\n| Transcription method | WER | Arousal | Valence | Dominance |\n|---|---|---|---|---|\n",
            self.partition.name()
        );
        for row in &self.rows {
            let wer = row.wer.map_or("—".to_owned(), |w| format!("{:.1}%", 100.0 * w));
            let [a, v, d] = row.report.scores();
            out.push_str(&format!("| {} | {wer} | {a:.3} | {v:.3} | {d:.3} |\n", row.source));
        }
        out
    }
}

/// Trains one audio-textual model per arm with the same configuration and
/// seeds, on that arm's transcripts, and scores it on `partition`.
pub fn transcript_study(
    model_config: &SerModelConfig,
    corpus: &[UtteranceRecord],
    arms: &[StudyArm<'_>],
    config: &TrainConfig,
    partition: Partition,
) -> Result<StudyReport> {
    if model_config.text.is_none() {
        return Err(Error::invalid("the transcript study needs an audio-textual model"));
    }
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        arm.source.validate()?;
        let (records, wer) = match (arm.source.kind, arm.transcriber) {
            (SourceKind::Human, None) => (corpus.to_vec(), None),
            (SourceKind::Asr, Some(asr)) => {
                let t = transcribe_corpus(corpus, asr)?;
                let w = t.wer(Some(partition))?.wer;
                (t.records, Some(w))
            }
            _ => return Err(Error::invalid(format!("{}: transcriber must be given exactly for ASR sources", arm.source))),
        };
        let (model, _) = train(SerModel::new(model_config.clone())?, &records, Regime::AudiotextFt, config)?;
        rows.push(StudyRow { source: arm.source.clone(), wer, report: evaluate(&model, &records, partition)? });
    }
    Ok(StudyReport { partition, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ser_core::corpus::generate_synthetic_corpus;
    use ser_core::EmotionTriple;

    fn record(id: &str, transcript: &str, seed: f32) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            audio: (0..400).map(|i| (i as f32 * seed).sin()).collect(),
            sample_rate: 16_000,
            transcript: transcript.into(),
            labels: EmotionTriple::new(0.5, 0.5, 0.5),
            partition: Partition::Test1,
        }
    }

    #[test]
    fn identity_has_zero_wer() {
        let corpus = generate_synthetic_corpus(40, 0, 8_000).unwrap();
        let asr = LookupTranscriber::new(&corpus, Distortion::Identity);
        let t = transcribe_corpus(&corpus, &asr).unwrap();
        assert_eq!(t.wer(None).unwrap().wer, 0.0);
        assert_eq!(t.failures(), 0);
    }

    #[test]
    fn dropping_every_second_word_halves() {
        let records = vec![record("a", "one two three four", 0.1), record("b", "Five, six!", 0.2)];
        let asr = LookupTranscriber::new(&records, Distortion::DropEverySecondWord);
        let t = transcribe_corpus(&records, &asr).unwrap();
        assert_eq!(t.records[0].transcript, "one three");
        // references of 4 and 2 words, 2 + 1 deletions
        let w = t.wer(None).unwrap();
        assert_eq!((w.deletions, w.reference_words), (3, 6));
        assert_eq!(w.wer, 0.5);
    }

    #[test]
    fn shuffle_keeps_keywords_in_place() {
        let corpus = generate_synthetic_corpus(60, 2, 8_000).unwrap();
        let asr = LookupTranscriber::new(&corpus, Distortion::ShuffleFillers { seed: 4 });
        let t = transcribe_corpus(&corpus, &asr).unwrap();
        let mut changed = 0;
        for (before, after) in corpus.iter().zip(&t.records) {
            let (b, a) = (normalize_text(&before.transcript), normalize_text(&after.transcript));
            assert_eq!(a.len(), b.len());
            for (x, y) in b.iter().zip(&a) {
                if is_sentiment_keyword(x) {
                    assert_eq!(x, y);
                }
            }
            let mut sb = b.clone();
            let mut sa = a.clone();
            sb.sort();
            sa.sort();
            assert_eq!(sa, sb);
            changed += usize::from(a != b);
            assert_eq!(before.audio, after.audio);
            assert_eq!(before.labels, after.labels);
        }
        assert!(changed > 0);
        assert!(t.wer(None).unwrap().wer > 0.0);
    }

    struct Flaky;

    impl Transcriber for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }

        fn transcribe(&self, samples: &[f32], _: u32) -> Result<String> {
            if samples[1] > 0.15 {
                Err(Error::invalid("decoder crashed"))
            } else {
                Ok("fine".into())
            }
        }
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let records = vec![record("a", "x", 0.1), record("b", "y", 0.3)];
        let t = transcribe_corpus(&records, &Flaky).unwrap();
        assert_eq!(t.failures(), 1);
        assert_eq!(t.records[1].transcript, "");
        assert_eq!(t.hypotheses[0].hypothesis, "fine");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hyp.csv");
        t.write_hypotheses(&path).unwrap();
        let back = read_hypotheses(&path).unwrap();
        assert_eq!(back["a"], "fine");
        assert_eq!(back["b"], "");
    }

    #[test]
    fn missing_program_is_a_run_error() {
        let asr = CommandTranscriber::new("whisper", "/nonexistent/whisper-cli", vec![]);
        let records = vec![record("a", "x", 0.1)];
        assert!(matches!(transcribe_corpus(&records, &asr), Err(Error::TranscriberUnavailable(_))));
    }

    #[test]
    fn command_transcriber_reads_stdout() {
        let asr = CommandTranscriber::new("echo", "echo", vec!["hello".into()]);
        asr.check_available().unwrap();
        let text = asr.transcribe(&[0.0; 16], 16_000).unwrap();
        assert!(text.starts_with("hello "), "{text}");
    }

    #[test]
    fn sources_display_and_validate() {
        assert_eq!(TranscriptionSource::human().to_string(), "Human");
        assert_eq!(TranscriptionSource::whisper_base().to_string(), "Whisper base (74M)");
        assert_eq!(TranscriptionSource::whisper_tiny().to_string(), "Whisper tiny (39M)");
        let bad = TranscriptionSource { kind: SourceKind::Human, system_name: Some("x".into()), params_reported: None };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn human_row_shows_dash() {
        let report = StudyReport {
            partition: Partition::Test1,
            rows: vec![
                StudyRow { source: TranscriptionSource::human(), wer: None, report: CccReport::from_scores(Partition::Test1, [0.7, 0.5, 0.6]) },
                StudyRow {
                    source: TranscriptionSource::whisper_base(),
                    wer: Some(0.222),
                    report: CccReport::from_scores(Partition::Test1, [0.7, 0.52, 0.6]),
                },
            ],
        };
        let md = report.to_markdown();
        assert!(md.contains("| Human | — | 0.700 | 0.500 | 0.600 |"), "{md}");
        assert!(md.contains("| Whisper base (74M) | 22.2% |"), "{md}");
    }
}
