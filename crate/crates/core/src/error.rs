use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid analysis config: {0}")]
    InvalidConfig(String),
    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error)]
pub enum WavError {
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported WAV format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("WAV I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

#[derive(Debug, Error)]
pub enum PitchError {
    #[error("invalid pitch config: {0}")]
    InvalidConfig(String),
    #[error("contour length mismatch: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Which of the five prosodic features an error concerns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Pitch,
    PitchRange,
    Duration,
    Energy,
    Tilt,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureKind::Pitch => "pitch",
            FeatureKind::PitchRange => "pitch_range",
            FeatureKind::Duration => "duration",
            FeatureKind::Energy => "energy",
            FeatureKind::Tilt => "tilt",
        })
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("insufficient voicing: {voiced} voiced frames, need {needed}")]
    InsufficientVoicing { voiced: usize, needed: usize },
    #[error("alignment is empty after excluding silence labels")]
    EmptyAlignment,
    #[error("utterance is entirely silent")]
    AllSilent,
    #[error("need at least 2 vectors to fit normalization stats, got {0}")]
    TooFewVectors(usize),
    #[error("feature {0} has zero variance across the corpus")]
    DegenerateFeature(FeatureKind),
    #[error("normalized value {0} outside [-1, 1]")]
    OutOfRange(f64),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("malformed alignment line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("alignment line {line}: segment starts before the previous one ends or is reversed")]
    Ordering { line: usize },
    #[error("feature {kind}: {source}")]
    Component {
        kind: FeatureKind,
        #[source]
        source: Box<FeatureError>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Pitch(#[from] PitchError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("malformed stats document: {0}")]
    Json(#[from] serde_json::Error),
}

impl FeatureError {
    pub fn for_feature(self, kind: FeatureKind) -> Self {
        FeatureError::Component { kind, source: Box::new(self) }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parameter out of range: {0}")]
    Range(String),
    #[error("corpus size must be at least 1")]
    EmptyCorpus,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum VocoderError {
    #[error("mel config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}
