use prosody_core::{CorpusError, FeatureError, VocoderError};
use prosody_tts::TtsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("grid value {0} outside [-1, 1]")]
    GridRange(f64),
    #[error("feature index {0} out of range (0..5)")]
    Dimension(usize),
    #[error("{failed} of {total} utterances failed measurement (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },
    #[error("unknown report format '{0}' (expected json, csv or svg)")]
    UnknownFormat(String),
    #[error(transparent)]
    Tts(#[from] TtsError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Vocoder(#[from] VocoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
}
