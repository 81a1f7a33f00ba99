use std::path::PathBuf;

use prosody_core::{CorpusError, FeatureError, SignalError, VocoderError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TtsError {
    #[error("graph error: {0}")]
    Graph(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("phone id {id} is out of vocabulary (size {vocab_size})")]
    OutOfVocabulary { id: usize, vocab_size: usize },
    #[error("empty phone sequence")]
    EmptySequence,
    #[error("prosody vector has {0} components, expected 5")]
    ProsodyLength(usize),
    #[error("prosody component {index} = {value} outside [-1, 1]")]
    ProsodyRange { index: usize, value: f64 },
    #[error("mel target has {found} bands, model expects {expected}")]
    MelShape { expected: usize, found: usize },
    #[error("training diverged at step {step}: non-finite value in {what}")]
    Divergence { step: u64, what: String },
    #[error("non-finite output during synthesis")]
    NonFinite,
    #[error("checkpoint I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (file corrupt or truncated)")]
    Checksum,
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Vocoder(#[from] VocoderError),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
}
