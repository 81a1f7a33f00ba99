use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use prosody_core::features::FEATURE_NAMES;
use prosody_tts::{AttentionMode, BiasMode};

#[derive(Parser, Debug)]
#[command(name = "prosody", version, about = "Prosody-controllable TTS workbench")]
pub struct Cli {
    /// JSON file of per-command defaults, e.g. {"train": {"steps": 2000}}.
    /// Flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract the five prosodic features of one utterance.
    Extract(ExtractArgs),
    /// Fit normalization statistics over a generated corpus.
    FitStats(FitStatsArgs),
    /// Render a synthetic corpus with known prosody.
    GenCorpus(GenCorpusArgs),
    /// Train the TTS model on a corpus.
    Train(TrainArgs),
    /// Synthesize one phone sequence to WAV.
    Synth(SynthArgs),
    /// Run a bias sweep and measure the output features.
    Sweep(SweepArgs),
    /// Render a sweep report as JSON, CSV or SVG.
    Report(ReportArgs),
    /// Serve the lever API over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub wav: PathBuf,
    /// Phone alignment TSV: start, end, label.
    #[arg(long)]
    pub align: PathBuf,
    /// Normalization statistics; adds the normalized vector to the output.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitStatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Phone inventory size including `sil`.
    #[arg(long, default_value_t = 20)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint path; statistics and vocabulary are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Total optimizer steps (including those of a resumed checkpoint).
    #[arg(long, default_value_t = 6000)]
    pub steps: u64,
    /// Wall-clock budget; training stops early when it runs out.
    #[arg(long)]
    pub minutes: Option<f64>,
    /// Seed of the batch order, dropout and attention noise.
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Seed of the parameter initialization.
    #[arg(long, default_value_t = 1)]
    pub model_seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Mel bands: 32 (desk scale, up to 3 kHz) or 80 (full band).
    #[arg(long, default_value_t = 32, value_parser = parse_n_mels)]
    pub n_mels: usize,
    /// Threads for feature extraction while loading the corpus.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Per-step JSON lines log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also write the checkpoint every this many steps.
    #[arg(long)]
    pub save_every: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Absolute,
    Additive,
}

impl From<ModeArg> for BiasMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Absolute => BiasMode::Absolute,
            ModeArg::Additive => BiasMode::Additive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    Hard,
    Soft,
}

impl From<AttentionArg> for AttentionMode {
    fn from(m: AttentionArg) -> Self {
        match m {
            AttentionArg::Hard => AttentionMode::Hard,
            AttentionArg::Soft => AttentionMode::Soft,
        }
    }
}

/// Model and its side files.
#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to `<ckpt>.stats.json`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Phone inventory, one label per line. Defaults to `<ckpt>.vocab.txt`,
    /// then to the synthetic inventory of the model's size.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Space-separated phone labels; `sil` is added at either end when missing.
    #[arg(long)]
    pub phones: String,
    /// `name=value` with value in [-1, 1]; unset dimensions are 0.
    #[arg(long, value_parser = parse_bias)]
    pub bias: Vec<(usize, f64)>,
    #[arg(long, value_enum, default_value_t = ModeArg::Absolute)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = AttentionArg::Hard)]
    pub attention: AttentionArg,
    #[arg(long, default_value_t = 1000)]
    pub max_frames: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the log-mel frames as JSON.
    #[arg(long)]
    pub mel_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    pub sentences: usize,
    /// Seed of the evaluation sentences.
    #[arg(long, default_value_t = 99)]
    pub seed: u64,
    /// Dimensions to sweep (default: all five).
    #[arg(long, value_delimiter = ',', value_parser = parse_feature)]
    pub dims: Vec<usize>,
    /// Bias grid (default: -1 to 1 in steps of 0.25).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub max_frames: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Largest tolerated fraction of unmeasurable utterances.
    #[arg(long, default_value_t = 0.05)]
    pub failure_limit: f64,
    /// Report JSON (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Sweep report JSON.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "json", value_parser = ["json", "csv", "svg"])]
    pub format: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
}

pub fn parse_feature(s: &str) -> Result<usize, String> {
    FEATURE_NAMES
        .iter()
        .position(|n| *n == s.trim())
        .ok_or_else(|| format!("unknown feature `{s}` (expected one of {})", FEATURE_NAMES.join(", ")))
}

/// `name=value` with a known feature name and a value in [-1, 1].
pub fn parse_bias(s: &str) -> Result<(usize, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let dim = parse_feature(name)?;
    let v: f64 = value.trim().parse().map_err(|_| format!("bias value `{value}` is not a number"))?;
    if !(-1.0..=1.0).contains(&v) {
        return Err(format!("bias {name}={v} is outside [-1, 1]"));
    }
    Ok((dim, v))
}

pub fn parse_n_mels(s: &str) -> Result<usize, String> {
    match s.trim() {
        "32" => Ok(32),
        "80" => Ok(80),
        _ => Err(format!("n_mels must be 32 or 80, got `{s}`")),
    }
}
