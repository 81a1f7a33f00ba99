//! Signal analysis and prosodic feature extraction for the prosody workbench.
//!
//! The five utterance-level features (log-pitch, log-pitch range, log phone
//! duration, energy and spectral tilt) are computed in [`features`] from the
//! voted pitch contour of [`pitch`], the silence mask of [`signal`] and a
//! phone alignment. [`corpus`] renders synthetic utterances with known
//! prosody, and [`vocoder`] turns mel spectrograms back into audio.

pub mod corpus;
pub mod error;
pub mod features;
pub mod pitch;
pub mod signal;
pub mod vocoder;
pub mod wav;

pub use error::{CorpusError, FeatureError, FeatureKind, PitchError, SignalError, VocoderError, WavError};
pub use features::{NormStats, PhoneAlignment, ProsodyVector};
pub use pitch::{PitchConfig, PitchContour};
pub use signal::{AnalysisConfig, AudioBuffer, MelSpectrogram, SilenceMask};
