//! Utterance-level prosodic features and their corpus normalization.
//!
//! Five features describe an utterance: mean log-F0 and the 5–95% quantile
//! spread of log-F0 over voiced frames, the mean log phone duration, the
//! energy `20 log10(mean |x|)` over non-silent frames, and the spectral tilt
//! `a1 = -r1/r0` of a first-order all-pole fit averaged over voiced frames.
//! Each feature is mapped to `[-1, 1]` by projecting `[M - 3σ, M + 3σ]` onto it
//! (corpus median `M`, population standard deviation `σ`) and clipping.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FeatureError, FeatureKind};
use crate::pitch::{track_pitch, PitchConfig, PitchContour};
use crate::signal::{hann, silence_mask, AnalysisConfig, AudioBuffer, SilenceMask};
use crate::wav::read_wav;

pub const N_FEATURES: usize = 5;

/// Short names, in vector order. These are also the bias keys of the control API.
pub const FEATURE_NAMES: [&str; N_FEATURES] = ["pitch", "pitch_range", "duration", "energy", "tilt"];

pub const FEATURE_KINDS: [FeatureKind; N_FEATURES] =
    [FeatureKind::Pitch, FeatureKind::PitchRange, FeatureKind::Duration, FeatureKind::Energy, FeatureKind::Tilt];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Raw,
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyVector {
    pub log_pitch: f64,
    pub log_pitch_range: f64,
    pub log_duration: f64,
    pub energy_db: f64,
    pub spectral_tilt: f64,
    pub space: Space,
}

impl ProsodyVector {
    pub fn from_array(values: [f64; N_FEATURES], space: Space) -> Self {
        Self {
            log_pitch: values[0],
            log_pitch_range: values[1],
            log_duration: values[2],
            energy_db: values[3],
            spectral_tilt: values[4],
            space,
        }
    }

    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [self.log_pitch, self.log_pitch_range, self.log_duration, self.energy_db, self.spectral_tilt]
    }

    pub fn zeros_normalized() -> Self {
        Self::from_array([0.0; N_FEATURES], Space::Normalized)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// One feature's normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub median: f64,
    pub sigma: f64,
    pub unit: String,
}

/// Corpus normalization statistics, one entry per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub log_pitch: FeatureStats,
    pub log_pitch_range: FeatureStats,
    pub log_duration: FeatureStats,
    pub energy_db: FeatureStats,
    pub spectral_tilt: FeatureStats,
    pub corpus_size: usize,
    pub config_hash: String,
}

pub const FEATURE_UNITS: [&str; N_FEATURES] = ["ln(Hz)", "ln(Hz)", "ln(s)", "dB", ""];

impl NormStats {
    pub fn from_parts(medians: [f64; N_FEATURES], sigmas: [f64; N_FEATURES], units: [&str; N_FEATURES], corpus_size: usize, config_hash: String) -> Self {
        let f = |i: usize| FeatureStats { median: medians[i], sigma: sigmas[i], unit: units[i].to_string() };
        Self {
            log_pitch: f(0),
            log_pitch_range: f(1),
            log_duration: f(2),
            energy_db: f(3),
            spectral_tilt: f(4),
            corpus_size,
            config_hash,
        }
    }

    pub fn features(&self) -> [&FeatureStats; N_FEATURES] {
        [&self.log_pitch, &self.log_pitch_range, &self.log_duration, &self.energy_db, &self.spectral_tilt]
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        for (f, kind) in self.features().iter().zip(FEATURE_KINDS) {
            if !(f.sigma > 0.0) || !f.sigma.is_finite() || !f.median.is_finite() {
                return Err(FeatureError::DegenerateFeature(kind));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, FeatureError> {
        let stats: Self = serde_json::from_str(text)?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FeatureError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| FeatureError::Io { path: path.to_path_buf(), source })
    }

    /// Digest of the serialized stats, used to tie checkpoints to their stats.
    pub fn digest(&self) -> String {
        hex::encode(&Sha256::digest(self.to_json().as_bytes())[..8])
    }
}

/// Median (lower of the two middle values on even counts) and population σ per feature.
pub fn fit_norm_stats(vectors: &[ProsodyVector], config_hash: &str) -> Result<NormStats, FeatureError> {
    if vectors.len() < 2 {
        return Err(FeatureError::TooFewVectors(vectors.len()));
    }
    let mut medians = [0.0; N_FEATURES];
    let mut sigmas = [0.0; N_FEATURES];
    for i in 0..N_FEATURES {
        let mut col: Vec<f64> = vectors.iter().map(|v| v.to_array()[i]).collect();
        col.sort_by(f64::total_cmp);
        medians[i] = col[(col.len() - 1) / 2];
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        sigmas[i] = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        if !(sigmas[i] > 0.0) {
            return Err(FeatureError::DegenerateFeature(FEATURE_KINDS[i]));
        }
    }
    Ok(NormStats::from_parts(medians, sigmas, FEATURE_UNITS, vectors.len(), config_hash.to_string()))
}

/// `clip((value - M) / 3σ, -1, 1)`.
pub fn normalize_value(value: f64, median: f64, sigma: f64) -> f64 {
    ((value - median) / (3.0 * sigma)).clamp(-1.0, 1.0)
}

/// `M + 3σ b` for `b` in `[-1, 1]`.
pub fn denormalize(b: f64, median: f64, sigma: f64) -> Result<f64, FeatureError> {
    if !(-1.0..=1.0).contains(&b) {
        return Err(FeatureError::OutOfRange(b));
    }
    if !(sigma > 0.0) {
        return Err(FeatureError::NonPositiveSigma(sigma));
    }
    Ok(median + 3.0 * sigma * b)
}

pub fn normalize(v: &ProsodyVector, stats: &NormStats) -> ProsodyVector {
    let raw = v.to_array();
    let fs = stats.features();
    let out = std::array::from_fn(|i| normalize_value(raw[i], fs[i].median, fs[i].sigma));
    ProsodyVector::from_array(out, Space::Normalized)
}

pub fn denormalize_vector(v: &ProsodyVector, stats: &NormStats) -> Result<ProsodyVector, FeatureError> {
    let b = v.to_array();
    let fs = stats.features();
    let mut out = [0.0; N_FEATURES];
    for i in 0..N_FEATURES {
        out[i] = denormalize(b[i], fs[i].median, fs[i].sigma)?;
    }
    Ok(ProsodyVector::from_array(out, Space::Raw))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub label: String,
    pub start: f64,
    pub end: f64,
}

impl PhoneSegment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Time-ordered, non-overlapping phone segments.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PhoneAlignment {
    pub segments: Vec<PhoneSegment>,
}

pub const DEFAULT_EXCLUDED_LABELS: [&str; 3] = ["sil", "sp", ""];

impl PhoneAlignment {
    pub fn new(segments: Vec<PhoneSegment>) -> Result<Self, FeatureError> {
        let mut prev_end = f64::NEG_INFINITY;
        for (i, s) in segments.iter().enumerate() {
            if !(0.0 <= s.start && s.start < s.end) || s.start < prev_end {
                return Err(FeatureError::Ordering { line: i + 1 });
            }
            prev_end = s.end;
        }
        Ok(Self { segments })
    }

    pub fn parse(text: &str) -> Result<Self, FeatureError> {
        let mut segments = Vec::new();
        let mut prev_end = f64::NEG_INFINITY;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if fields.len() != 3 {
                return Err(FeatureError::MalformedLine { line: line_no, reason: format!("expected 3 tab-separated fields, got {}", fields.len()) });
            }
            let num = |s: &str, what: &str| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| FeatureError::MalformedLine { line: line_no, reason: format!("bad {what} time {s:?}") })
            };
            let (start, end) = (num(fields[1], "start")?, num(fields[2], "end")?);
            if !(0.0 <= start && start < end) || start < prev_end {
                return Err(FeatureError::Ordering { line: line_no });
            }
            prev_end = end;
            segments.push(PhoneSegment { label: fields[0].trim().to_string(), start, end });
        }
        if segments.is_empty() {
            return Err(FeatureError::EmptyAlignment);
        }
        Ok(Self { segments })
    }

    pub fn to_tsv(&self) -> String {
        self.segments.iter().map(|s| format!("{}\t{}\t{}\n", s.label, s.start, s.end)).collect()
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end)
    }

    /// Same alignment shifted by `dt` seconds.
    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|s| PhoneSegment { label: s.label.clone(), start: s.start + dt, end: s.end + dt })
                .collect(),
        }
    }
}

pub fn parse_alignment(path: impl AsRef<Path>) -> Result<PhoneAlignment, FeatureError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| FeatureError::Io { path: path.to_path_buf(), source })?;
    PhoneAlignment::parse(&text)
}

/// Linear interpolation between order statistics of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean log-F0 and the 5–95% quantile spread of log-F0 over voiced frames.
pub fn utterance_pitch_features(contour: &PitchContour) -> Result<(f64, f64), FeatureError> {
    let mut logs: Vec<f64> = contour.voiced_values().iter().map(|f| f.ln()).collect();
    if logs.len() < 2 {
        return Err(FeatureError::InsufficientVoicing { voiced: logs.len(), needed: 2 });
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.sort_by(f64::total_cmp);
    let range = quantile_sorted(&logs, 0.95) - quantile_sorted(&logs, 0.05);
    Ok((mean, range))
}

pub fn mean_log_duration<S: AsRef<str>>(alignment: &PhoneAlignment, exclude_labels: &[S]) -> Result<f64, FeatureError> {
    let excluded: BTreeSet<&str> = exclude_labels.iter().map(AsRef::as_ref).collect();
    let logs: Vec<f64> = alignment
        .segments
        .iter()
        .filter(|s| !excluded.contains(s.label.as_str()))
        .map(|s| s.duration().ln())
        .collect();
    if logs.is_empty() {
        return Err(FeatureError::EmptyAlignment);
    }
    Ok(logs.iter().sum::<f64>() / logs.len() as f64)
}

/// `20 log10` of the mean absolute amplitude over samples covered by non-silent frames.
pub fn utterance_energy(audio: &AudioBuffer, mask: &SilenceMask, analysis: &AnalysisConfig) -> Result<f64, FeatureError> {
    let (len, hop) = (analysis.frame_len(), analysis.hop_len());
    let mut covered = vec![false; audio.len()];
    for (k, &silent) in mask.0.iter().enumerate() {
        if !silent {
            let end = (k * hop + len).min(audio.len());
            covered[k * hop..end].iter_mut().for_each(|c| *c = true);
        }
    }
    let (sum, n) = audio
        .samples
        .iter()
        .zip(&covered)
        .filter(|(_, &c)| c)
        .fold((0.0, 0usize), |(s, n), (x, _)| (s + x.abs(), n + 1));
    if n == 0 {
        return Err(FeatureError::AllSilent);
    }
    Ok(20.0 * (sum / n as f64).log10())
}

/// First-order predictor coefficient `a1 = -r1/r0` of a windowed frame.
pub fn frame_tilt(windowed: &[f64]) -> Option<f64> {
    let r0: f64 = windowed.iter().map(|x| x * x).sum();
    if r0 <= 0.0 {
        return None;
    }
    let r1: f64 = windowed.windows(2).map(|w| w[0] * w[1]).sum();
    Some(-r1 / r0)
}

/// Mean of [`frame_tilt`] over frames flagged in `voiced`.
pub fn tilt_over_frames(audio: &AudioBuffer, voiced: &[bool], analysis: &AnalysisConfig) -> Option<f64> {
    let (len, hop) = (analysis.frame_len(), analysis.hop_len());
    let window = hann(len);
    let mut frame = vec![0.0; len];
    let (mut sum, mut n) = (0.0, 0usize);
    for (k, _) in voiced.iter().enumerate().filter(|(_, &v)| v) {
        if k * hop + len > audio.len() {
            break;
        }
        for (i, f) in frame.iter_mut().enumerate() {
            *f = audio.samples[k * hop + i] * window[i];
        }
        if let Some(t) = frame_tilt(&frame) {
            sum += t;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn utterance_spectral_tilt(audio: &AudioBuffer, contour: &PitchContour, analysis: &AnalysisConfig) -> Result<f64, FeatureError> {
    tilt_over_frames(audio, &contour.voiced(), analysis).ok_or(FeatureError::InsufficientVoicing { voiced: 0, needed: 1 })
}

/// Everything [`extract_prosody`] needs besides the inputs themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub analysis: AnalysisConfig,
    pub pitch: PitchConfig,
    pub silence_threshold_db: f64,
    pub exclude_labels: Vec<String>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            analysis: AnalysisConfig::default(),
            pitch: PitchConfig::default(),
            silence_threshold_db: -40.0,
            exclude_labels: DEFAULT_EXCLUDED_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ExtractConfig {
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialize");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Intermediate analysis products alongside the feature vector.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub vector: ProsodyVector,
    pub contour: PitchContour,
    pub mask: SilenceMask,
}

/// Signal-derived features (everything except duration).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcousticFeatures {
    pub log_pitch: f64,
    pub log_pitch_range: f64,
    pub energy_db: f64,
    pub spectral_tilt: f64,
}

pub fn analyze_audio(audio: &AudioBuffer, config: &ExtractConfig) -> Result<(AcousticFeatures, PitchContour, SilenceMask), FeatureError> {
    let mask = silence_mask(audio, &config.analysis, config.silence_threshold_db)?;
    if mask.silent_count() == mask.len() {
        return Err(FeatureError::AllSilent.for_feature(FeatureKind::Energy));
    }
    let energy_db = utterance_energy(audio, &mask, &config.analysis).map_err(|e| e.for_feature(FeatureKind::Energy))?;
    let contour = track_pitch(audio, &config.analysis, &config.pitch, Some(&mask))?;
    let (log_pitch, log_pitch_range) = utterance_pitch_features(&contour).map_err(|e| e.for_feature(FeatureKind::Pitch))?;
    let spectral_tilt = utterance_spectral_tilt(audio, &contour, &config.analysis).map_err(|e| e.for_feature(FeatureKind::Tilt))?;
    Ok((AcousticFeatures { log_pitch, log_pitch_range, energy_db, spectral_tilt }, contour, mask))
}

pub fn extract_prosody_detailed(audio: &AudioBuffer, alignment: &PhoneAlignment, config: &ExtractConfig) -> Result<Analysis, FeatureError> {
    let (ac, contour, mask) = analyze_audio(audio, config)?;
    let log_duration = mean_log_duration(alignment, &config.exclude_labels).map_err(|e| e.for_feature(FeatureKind::Duration))?;
    let vector = ProsodyVector {
        log_pitch: ac.log_pitch,
        log_pitch_range: ac.log_pitch_range,
        log_duration,
        energy_db: ac.energy_db,
        spectral_tilt: ac.spectral_tilt,
        space: Space::Raw,
    };
    Ok(Analysis { vector, contour, mask })
}

/// The raw five-feature vector of one utterance.
pub fn extract_prosody(audio: &AudioBuffer, alignment: &PhoneAlignment, config: &ExtractConfig) -> Result<ProsodyVector, FeatureError> {
    extract_prosody_detailed(audio, alignment, config).map(|a| a.vector)
}

pub fn extract_prosody_files(wav: impl AsRef<Path>, alignment: impl AsRef<Path>, config: &ExtractConfig) -> Result<ProsodyVector, FeatureError> {
    let alignment = parse_alignment(alignment)?;
    let audio = read_wav(wav)?;
    extract_prosody(&audio, &alignment, config)
}

/// Per-utterance feature dump: `{utt_id, raw, normalized}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    pub utt_id: String,
    pub raw: ProsodyVector,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized: Option<ProsodyVector>,
}
