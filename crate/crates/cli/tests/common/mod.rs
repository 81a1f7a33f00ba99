#![allow(dead_code)]

use std::path::Path;

use prosody_core::corpus::Vocabulary;
use prosody_core::features::{FEATURE_UNITS, N_FEATURES};
use prosody_core::NormStats;
use prosody_tts::checkpoint::CheckpointMeta;
use prosody_tts::gradcheck::{toy_config, ToySizes};
use prosody_tts::{save_checkpoint, Model, ModelConfig};

pub const VOCAB: usize = 20;

/// Untrained model with desk-scale mel framing and tiny layers.
pub fn model_config() -> ModelConfig {
    let sizes = ToySizes { batch: 1, input: 8, hidden: 8, seq_len: 4, n_mels: 32 };
    ModelConfig { vocab_size: VOCAB, ..toy_config(&sizes, 4) }
}

pub fn model() -> Model {
    Model::new(model_config()).unwrap()
}

/// Feature values at -1, 0 and +1 on the normalized scale (pitch and range
/// in Hz, duration in ms, energy in dB, tilt).
pub const TABLE: [(f64, f64, f64); N_FEATURES] =
    [(144.2, 234.0, 323.7), (50.9, 355.8, 660.8), (32.7, 117.6, 202.5), (-26.2, -20.7, -15.2), (-0.997, -0.978, -0.958)];

/// Medians at the midpoints and sigmas spanning a sixth of each row.
pub fn table_stats() -> NormStats {
    let rows = TABLE.map(|(lo, _, hi)| (lo, hi));
    let mut medians = [0.0; N_FEATURES];
    let mut sigmas = [0.0; N_FEATURES];
    for (i, (lo, hi)) in rows.into_iter().enumerate() {
        medians[i] = (lo + hi) / 2.0;
        sigmas[i] = (hi - lo) / 6.0;
    }
    NormStats::from_parts(medians, sigmas, FEATURE_UNITS, 0, "fixture".into())
}

/// Writes `m.bin` with stats and vocabulary side files into `dir`.
pub fn write_checkpoint(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("m.bin");
    let meta = CheckpointMeta { step: 7, stats_digest: Some(table_stats().digest()), ..CheckpointMeta::default() };
    save_checkpoint(&path, &model(), &meta).unwrap();
    table_stats().save(dir.join("m.bin.stats.json")).unwrap();
    std::fs::write(dir.join("m.bin.vocab.txt"), Vocabulary::synthetic(VOCAB).unwrap().to_text()).unwrap();
    path
}
