//! Objective evaluation of prosody control.
//!
//! [`sweep`] synthesizes a set of sentences with one prosody dimension at a
//! time pinned to each value of a bias grid, [`measure`] re-extracts the five
//! features from the output (pitch, energy and tilt from Griffin-Lim audio,
//! duration from the attention path) and aggregates measured-vs-target
//! statistics, and [`report`] renders the result as JSON, CSV or SVG.

pub mod error;
pub mod measure;
pub mod report;
pub mod stats;
pub mod sweep;

pub use error::EvalError;
pub use measure::{measure_sweep, MeasureConfig, SweepReport};
pub use report::{render_report, ReportFormat};
pub use sweep::{bias_sweep, sweep_utterance_count, SweepConfig, SweepPlan, SynthesizedSet};
