//! A desk-scale sequence-to-sequence TTS model whose decoder is conditioned
//! on a five-value prosody vector.
//!
//! Phones are embedded and run through a bidirectional LSTM. A separate
//! three-layer LSTM predicts the prosody vector from the phone embeddings
//! behind a stop-gradient barrier. The decoder consumes the previous mel
//! frame through a dropout pre-net, the prosody vector and the previous
//! attention context, attends with location-sensitive monotonic attention
//! and emits `frames_per_step` mel frames plus a stop logit per step.
//!
//! Training runs on [`graph::Graph`], a small tape-based reverse-mode
//! differentiation engine over `f64` matrices.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::TtsError;
pub use model::{AttentionMode, BiasMode, Model, ModelConfig, SynthesisOptions, Synthesis};
pub use tensor::Tensor;
pub use train::{Dataset, TrainConfig, Trainer};
