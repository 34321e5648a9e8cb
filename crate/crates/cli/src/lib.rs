//! `ser` command line: training, evaluation, probing, transcription and
//! reports over a corpus manifest. Every command writes its artifacts and a
//! `run_manifest.json` under `--out`.

pub mod commands;
pub mod error;
pub mod report;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ser", version, about = "Dimensional speech emotion recognition from audio and transcripts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune a model (or fit layer probes) and evaluate it on every split.
    Train(TrainArgs),
    /// Score a saved model, or a reference stub, on one split.
    Eval(EvalArgs),
    /// Fit layer-importance probes on a frozen audio encoder.
    Probe(ProbeArgs),
    /// Replace transcripts with ASR hypotheses and measure WER.
    Transcribe(TranscribeArgs),
    /// Compose tables and plots from finished runs.
    Report(ReportArgs),
    /// Write a synthetic corpus (WAV files plus manifest).
    Synth(SynthArgs),
}

/// Flags shared by the commands that read a corpus.
#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus manifest CSV; audio paths are relative to its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training hyperparameters (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    #[value(name = "audio_ft")]
    AudioFt,
    #[value(name = "audiotext_ft")]
    AudiotextFt,
    #[value(name = "ft_frz")]
    FtFrz,
    #[value(name = "probe")]
    Probe,
}

impl From<RegimeArg> for ser_model::trainer::Regime {
    fn from(r: RegimeArg) -> Self {
        use ser_model::trainer::Regime;
        match r {
            RegimeArg::AudioFt => Regime::AudioFt,
            RegimeArg::AudiotextFt => Regime::AudiotextFt,
            RegimeArg::FtFrz => Regime::FtFrz,
            RegimeArg::Probe => Regime::Probe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Dev,
    Test1,
    Test2,
}

impl From<SplitArg> for ser_core::Partition {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Dev => ser_core::Partition::Development,
            SplitArg::Test1 => ser_core::Partition::Test1,
            SplitArg::Test2 => ser_core::Partition::Test2,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum)]
    pub regime: RegimeArg,
    /// Audio encoder preset, e.g. distilhubert, hubert-base, w2v2-l-robust-p
    /// or tiny-audio-2x32.
    #[arg(long, default_value = "distilhubert")]
    pub encoder: String,
    /// Text encoder preset; defaults to `tinybert-4l`, or `tiny-text-2x32`
    /// for tiny audio presets.
    #[arg(long)]
    pub text_encoder: Option<String>,
    /// Only evaluate on this split (default: dev, test1 and test2).
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StubArg {
    /// Returns the gold labels.
    Perfect,
    /// Returns 0.5 on every dimension.
    Constant,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "test1")]
    pub split: SplitArg,
    /// Model written by `ser train`.
    #[arg(long, conflicts_with = "stub", required_unless_present = "stub")]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub stub: Option<StubArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DimensionArg {
    Arousal,
    Valence,
    Dominance,
    All,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value = "hubert-base")]
    pub encoder: String,
    #[arg(long, value_enum, default_value = "all")]
    pub dimension: DimensionArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AsrStubArg {
    Identity,
    DropEverySecondWord,
    ShuffleFillers,
}

#[derive(Debug, Args)]
pub struct TranscribeArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Program called as `<program> <args...> <wav>`, printing the
    /// hypothesis on stdout.
    #[arg(long, conflicts_with = "stub", required_unless_present = "stub")]
    pub asr_command: Option<PathBuf>,
    #[arg(long = "asr-arg", allow_hyphen_values = true)]
    pub asr_args: Vec<String>,
    /// System name recorded with the hypotheses.
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long, value_enum)]
    pub stub: Option<AsrStubArg>,
    /// Split on which WER is reported (default: every split).
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories written by `ser train` / `ser probe`.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command line; `arguments` are recorded in the run manifest.
pub fn execute(cli: Cli, arguments: Vec<String>) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => commands::train(&a, arguments),
        Command::Eval(a) => commands::eval(&a, arguments),
        Command::Probe(a) => commands::probe(&a, arguments),
        Command::Transcribe(a) => commands::transcribe(&a, arguments),
        Command::Report(a) => commands::report(&a, arguments),
        Command::Synth(a) => commands::synth(&a, arguments),
    }
}
