use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use prosody_core::corpus::Vocabulary;
use prosody_core::features::{analyze_audio, normalize, ExtractConfig, Space, FEATURE_NAMES, N_FEATURES};
use prosody_core::signal::deemphasize;
use prosody_core::vocoder::{griffin_lim_with, GriffinLimOptions, MelInverter, PhaseInit};
use prosody_core::{AudioBuffer, NormStats, ProsodyVector};
use prosody_tts::Synthesis;

use crate::error::EvalError;
use crate::stats::{mean_std, pearson, spearman};
use crate::sweep::{parallel_map, SweepConfig, SynthesizedSet};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// How generated mels are turned back into features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasureConfig {
    pub extract: ExtractConfig,
    pub griffin_lim: GriffinLimOptions,
    /// Undoes the analysis pre-emphasis baked into the mel magnitudes.
    pub deemphasis: f64,
    /// Largest tolerated fraction of failed measurements.
    pub failure_limit: f64,
    pub threads: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            extract: ExtractConfig::default(),
            // Unscaled magnitudes keep the energy level; random initial phase
            // avoids the buzzy zero-phase start that confuses the pitch vote.
            griffin_lim: GriffinLimOptions { iterations: 50, power: 1.0, peak: None, init: PhaseInit::Random(1) },
            deemphasis: 0.97,
            failure_limit: 0.05,
            threads: 1,
        }
    }
}

/// Audio of a generated mel spectrogram.
pub fn vocode(synthesis: &Synthesis, inverter: &MelInverter, config: &MeasureConfig) -> Result<AudioBuffer, EvalError> {
    let linear = inverter.invert(&synthesis.mel)?;
    let audio = griffin_lim_with(&linear, &config.griffin_lim, false).audio;
    Ok(deemphasize(&audio, config.deemphasis))
}

/// Mean log phone duration from the attention path, over phones whose label
/// is not excluded and that received at least one frame. Returns the value
/// and the number of such phones that were skipped entirely.
pub fn attention_duration(synthesis: &Synthesis, phone_ids: &[usize], vocab: &Vocabulary, extract: &ExtractConfig) -> Option<(f64, usize)> {
    let excluded: BTreeSet<&str> = extract.exclude_labels.iter().map(String::as_str).collect();
    let hop = synthesis.mel.config.hop_ms / 1000.0;
    let counts = synthesis.frames_per_phone(phone_ids.len());
    let mut logs = Vec::new();
    let mut skipped = 0;
    for (&id, &n) in phone_ids.iter().zip(&counts) {
        if excluded.contains(vocab.label(id).unwrap_or("")) {
            continue;
        }
        if n == 0 {
            skipped += 1;
        } else {
            logs.push((n as f64 * hop).ln());
        }
    }
    (!logs.is_empty()).then(|| (logs.iter().sum::<f64>() / logs.len() as f64, skipped))
}

/// Raw features of one synthesis: pitch, range, energy and tilt from the
/// vocoded audio, duration from the attention path.
pub fn measure_synthesis(
    synthesis: &Synthesis,
    phone_ids: &[usize],
    vocab: &Vocabulary,
    inverter: &MelInverter,
    config: &MeasureConfig,
) -> Result<(ProsodyVector, usize), String> {
    let audio = vocode(synthesis, inverter, config).map_err(|e| e.to_string())?;
    measure_vocoded(synthesis, &audio, phone_ids, vocab, config)
}

/// [`measure_synthesis`] for audio that was already vocoded.
pub fn measure_vocoded(
    synthesis: &Synthesis,
    audio: &AudioBuffer,
    phone_ids: &[usize],
    vocab: &Vocabulary,
    config: &MeasureConfig,
) -> Result<(ProsodyVector, usize), String> {
    let (ac, _, _) = analyze_audio(audio, &config.extract).map_err(|e| e.to_string())?;
    let (log_duration, skipped) =
        attention_duration(synthesis, phone_ids, vocab, &config.extract).ok_or_else(|| "attention covered no spoken phone".to_string())?;
    let v = ProsodyVector {
        log_pitch: ac.log_pitch,
        log_pitch_range: ac.log_pitch_range,
        log_duration,
        energy_db: ac.energy_db,
        spectral_tilt: ac.spectral_tilt,
        space: Space::Raw,
    };
    Ok((v, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredItem {
    pub job: usize,
    pub sentence: usize,
    pub bias: [f64; N_FEATURES],
    pub frames: usize,
    pub truncated: bool,
    pub monotonic: bool,
    /// Spoken phones the attention skipped.
    pub skipped_phones: usize,
    pub raw: Option<ProsodyVector>,
    pub measured: Option<[f64; N_FEATURES]>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub target: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSweep {
    pub feature: String,
    pub dim: usize,
    pub points: Vec<GridPoint>,
    /// Target against measured value over all utterances.
    pub pearson_r: Option<f64>,
    /// Target against the per-grid-point mean.
    pub spearman_rho: Option<f64>,
    pub n: usize,
}

/// One measured value of dimension `dim` at bias `target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub dim: usize,
    pub target: f64,
    pub value: f64,
}

/// Per-dimension statistics. The observations are sorted first, so the
/// result does not depend on their order.
pub fn aggregate(dims: &[usize], observations: &[Observation]) -> Vec<FeatureSweep> {
    let mut obs = observations.to_vec();
    obs.sort_by(|a, b| a.dim.cmp(&b.dim).then(a.target.total_cmp(&b.target)).then(a.value.total_cmp(&b.value)));
    dims.iter()
        .map(|&dim| {
            let mine: Vec<&Observation> = obs.iter().filter(|o| o.dim == dim).collect();
            let mut targets: Vec<f64> = mine.iter().map(|o| o.target).collect();
            targets.dedup();
            let points: Vec<GridPoint> = targets
                .iter()
                .map(|&t| {
                    let vals: Vec<f64> = mine.iter().filter(|o| o.target == t).map(|o| o.value).collect();
                    let (mean, std) = mean_std(&vals);
                    GridPoint { target: t, n: vals.len(), mean, std }
                })
                .collect();
            let xs: Vec<f64> = mine.iter().map(|o| o.target).collect();
            let ys: Vec<f64> = mine.iter().map(|o| o.value).collect();
            let pt: Vec<f64> = points.iter().map(|p| p.target).collect();
            let pm: Vec<f64> = points.iter().map(|p| p.mean).collect();
            FeatureSweep {
                feature: FEATURE_NAMES[dim].to_string(),
                dim,
                pearson_r: pearson(&xs, &ys),
                spearman_rho: spearman(&pt, &pm),
                n: mine.len(),
                points,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub features: Vec<FeatureSweep>,
    pub sentences: usize,
    /// Unique syntheses.
    pub utterances: usize,
    pub failed: usize,
    pub truncated: usize,
    pub non_monotonic: usize,
    pub warnings: Vec<String>,
    pub sweep: SweepConfig,
    pub measure: MeasureConfig,
    pub stats_digest: String,
    pub items: Vec<MeasuredItem>,
}

impl SweepReport {
    pub fn feature(&self, name: &str) -> Option<&FeatureSweep> {
        self.features.iter().find(|f| f.feature == name)
    }
}

/// Measures every synthesis, normalizes with `stats` and aggregates.
/// Fails when more than `config.failure_limit` of the utterances cannot be measured.
pub fn measure_sweep(set: &SynthesizedSet, stats: &NormStats, vocab: &Vocabulary, config: &MeasureConfig) -> Result<SweepReport, EvalError> {
    let mel_config = set
        .outputs
        .iter()
        .find_map(|o| o.as_ref().ok())
        .map(|s| s.mel.config.clone())
        .ok_or(EvalError::TooManyFailures { failed: set.outputs.len(), total: set.outputs.len() })?;
    let inverter = MelInverter::new(&mel_config)?;
    let items = parallel_map(set.outputs.len(), config.threads, |j| {
        let job = &set.plan.jobs[j];
        let mut item = MeasuredItem {
            job: j,
            sentence: job.sentence,
            bias: job.bias,
            frames: 0,
            truncated: false,
            monotonic: true,
            skipped_phones: 0,
            raw: None,
            measured: None,
            error: None,
        };
        match &set.outputs[j] {
            Err(e) => item.error = Some(e.clone()),
            Ok(s) => {
                item.frames = s.mel.n_frames();
                item.truncated = s.truncated;
                item.monotonic = s.path_is_monotonic();
                match measure_synthesis(s, &set.sentences[job.sentence], vocab, &inverter, config) {
                    Ok((raw, skipped)) => {
                        item.skipped_phones = skipped;
                        item.measured = Some(normalize(&raw, stats).to_array());
                        item.raw = Some(raw);
                    }
                    Err(e) => item.error = Some(e),
                }
            }
        }
        item
    });
    let total = items.len();
    let failed = items.iter().filter(|i| i.measured.is_none()).count();
    if failed as f64 > config.failure_limit * total as f64 {
        return Err(EvalError::TooManyFailures { failed, total });
    }
    let mut observations = Vec::new();
    for point in &set.plan.points {
        for &j in &point.jobs {
            if let Some(m) = items[j].measured {
                observations.push(Observation { dim: point.dim, target: point.target, value: m[point.dim] });
            }
        }
    }
    let mut warnings: Vec<String> = set.warning.iter().cloned().collect();
    warnings.push("pitch, energy and tilt are measured on Griffin-Lim audio; energy and tilt carry vocoder bias".into());
    Ok(SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        features: aggregate(&set.config.dims, &observations),
        sentences: set.sentences.len(),
        utterances: total,
        failed,
        truncated: items.iter().filter(|i| i.truncated).count(),
        non_monotonic: items.iter().filter(|i| !i.monotonic).count(),
        warnings,
        sweep: set.config.clone(),
        measure: config.clone(),
        stats_digest: stats.digest(),
        items,
    })
}
