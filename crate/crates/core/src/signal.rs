//! Framing, pre-emphasis, STFT magnitudes, mel filterbank and silence detection.
//!
//! Everything in here is a pure function of its inputs. Samples are kept as
//! normalized `f64` in `[-1, 1]`; integer PCM only appears at the WAV boundary.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::SignalError;

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if sample_rate == 0 {
            return Err(SignalError::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SignalError::NonFinite(i));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Short-time analysis parameters shared by every analysis path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub preemphasis: f64,
    pub log_floor: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            frame_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 1024,
            n_mels: 80,
            fmin: 50.0,
            fmax: 12_000.0,
            preemphasis: 0.97,
            log_floor: 1e-5,
        }
    }
}

impl AnalysisConfig {
    pub fn with_n_mels(mut self, n_mels: usize) -> Self {
        self.n_mels = n_mels;
        self
    }

    pub fn frame_len(&self) -> usize {
        (self.frame_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `n` samples: `1 + (n - frame_len) / hop`, or 0.
    pub fn frame_count(&self, n: usize) -> usize {
        frame_count(n, self.frame_len(), self.hop_len())
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |m: &str| Err(SignalError::InvalidConfig(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.frame_len() == 0 || self.hop_len() == 0 {
            return bad("frame and hop must each cover at least one sample");
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.frame_len() {
            return bad("fft_size must be a power of two no smaller than the frame length");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate/2");
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad("preemphasis must lie in [0, 1)");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    fn check_audio(&self, audio: &AudioBuffer) -> Result<(), SignalError> {
        self.validate()?;
        if audio.sample_rate != self.sample_rate {
            return Err(SignalError::SampleRateMismatch {
                expected: self.sample_rate,
                found: audio.sample_rate,
            });
        }
        Ok(())
    }
}

pub fn frame_count(n: usize, frame_len: usize, hop: usize) -> usize {
    if n < frame_len || hop == 0 {
        0
    } else {
        1 + (n - frame_len) / hop
    }
}

/// `out[0] = in[0]`, `out[n] = in[n] - coeff * in[n-1]`.
pub fn preemphasize(audio: &AudioBuffer, coeff: f64) -> AudioBuffer {
    let x = &audio.samples;
    let mut out = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        out.push(first);
        out.extend(x.windows(2).map(|w| w[1] - coeff * w[0]));
    }
    AudioBuffer { samples: out, sample_rate: audio.sample_rate }
}

/// Inverse of [`preemphasize`]: `out[n] = in[n] + coeff * out[n-1]`.
pub fn deemphasize(audio: &AudioBuffer, coeff: f64) -> AudioBuffer {
    let mut prev = 0.0;
    let samples = audio
        .samples
        .iter()
        .map(|&s| {
            prev = s + coeff * prev;
            prev
        })
        .collect();
    AudioBuffer { samples, sample_rate: audio.sample_rate }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Windowed frames; frame `k` covers samples `[k*hop, k*hop + frame_len)`.
pub fn frame_signal(audio: &AudioBuffer, config: &AnalysisConfig) -> Result<Vec<Vec<f64>>, SignalError> {
    config.check_audio(audio)?;
    let (len, hop) = (config.frame_len(), config.hop_len());
    let window = hann(len);
    Ok((0..config.frame_count(audio.len()))
        .map(|k| {
            audio.samples[k * hop..k * hop + len]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect())
}

/// Forward real FFT helper that zero-pads to a fixed size.
pub struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    size: usize,
    buf: Vec<Complex<f64>>,
}

impl Spectrum {
    pub fn new(size: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(size);
        Self { fft, size, buf: vec![Complex::default(); size] }
    }

    /// Complex spectrum of the zero-padded input, bins `0..=size/2`.
    pub fn complex(&mut self, frame: &[f64]) -> Vec<Complex<f64>> {
        self.run(frame);
        self.buf[..self.size / 2 + 1].to_vec()
    }

    pub fn magnitude(&mut self, frame: &[f64]) -> Vec<f64> {
        self.run(frame);
        self.buf[..self.size / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    fn run(&mut self, frame: &[f64]) {
        for (i, slot) in self.buf.iter_mut().enumerate() {
            *slot = Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0);
        }
        self.fft.process(&mut self.buf);
    }
}

/// `|STFT|` of the signal, one row per frame, `fft_size/2 + 1` columns.
pub fn stft_magnitude(audio: &AudioBuffer, config: &AnalysisConfig) -> Result<Vec<Vec<f64>>, SignalError> {
    let frames = frame_signal(audio, config)?;
    let mut spec = Spectrum::new(config.fft_size);
    Ok(frames.iter().map(|f| spec.magnitude(f)).collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank on the mel scale; each filter's weights sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels` rows of `n_bins` weights.
    pub weights: Vec<Vec<f64>>,
    /// `n_mels + 2` band edge frequencies in Hz.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(config: &AnalysisConfig) -> Self {
        let n_bins = config.n_bins();
        let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax));
        let edges_hz: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
        let weights = (0..config.n_mels)
            .map(|m| {
                let (l, c, h) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                let mut row: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        ((f - l) / (c - l)).min((h - f) / (h - c)).max(0.0)
                    })
                    .collect();
                let area: f64 = row.iter().sum();
                if area > 0.0 {
                    row.iter_mut().for_each(|w| *w /= area);
                } else {
                    // band narrower than one bin: take the nearest bin
                    let k = ((c / bin_hz).round() as usize).min(n_bins - 1);
                    row[k] = 1.0;
                }
                row
            })
            .collect();
        Self { weights, edges_hz }
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    pub fn apply(&self, magnitudes: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(magnitudes).map(|(w, m)| w * m).sum())
            .collect()
    }

    /// Bands whose support `(lower edge, upper edge)` contains `hz`.
    pub fn bands_containing(&self, hz: f64) -> Vec<usize> {
        (0..self.n_mels())
            .filter(|&m| self.edges_hz[m] < hz && hz < self.edges_hz[m + 2])
            .collect()
    }
}

/// Log-mel magnitudes, `frames.len()` rows of `n_mels` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub frames: Vec<Vec<f64>>,
    pub config: AnalysisConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_mels(&self) -> usize {
        self.config.n_mels
    }
}

pub fn mel_spectrogram(audio: &AudioBuffer, config: &AnalysisConfig) -> Result<MelSpectrogram, SignalError> {
    config.check_audio(audio)?;
    let emphasized = preemphasize(audio, config.preemphasis);
    let bank = MelFilterbank::new(config);
    let frames = stft_magnitude(&emphasized, config)?
        .iter()
        .map(|mag| bank.apply(mag).into_iter().map(|v| v.max(config.log_floor).ln()).collect())
        .collect();
    Ok(MelSpectrogram { frames, config: config.clone() })
}

/// Per-frame flag, `true` for silence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SilenceMask(pub Vec<bool>);

impl SilenceMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn silent_count(&self) -> usize {
        self.0.iter().filter(|&&s| s).count()
    }
}

/// Frame RMS levels in dB (`-inf` for digital silence).
pub fn frame_levels_db(audio: &AudioBuffer, config: &AnalysisConfig) -> Result<Vec<f64>, SignalError> {
    config.check_audio(audio)?;
    let (len, hop) = (config.frame_len(), config.hop_len());
    Ok((0..config.frame_count(audio.len()))
        .map(|k| {
            let frame = &audio.samples[k * hop..k * hop + len];
            let ms = frame.iter().map(|s| s * s).sum::<f64>() / len as f64;
            10.0 * ms.log10()
        })
        .collect())
}

/// A frame is silent when its RMS level is more than `|threshold_db|` below the loudest frame.
pub fn silence_mask(audio: &AudioBuffer, config: &AnalysisConfig, threshold_db: f64) -> Result<SilenceMask, SignalError> {
    if !(threshold_db < 0.0) {
        return Err(SignalError::InvalidConfig("silence threshold must be negative".into()));
    }
    let levels = frame_levels_db(audio, config)?;
    let peak = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SilenceMask(
        levels
            .iter()
            .map(|&l| peak == f64::NEG_INFINITY || l < peak + threshold_db)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, amp: f64, n: usize, sr: u32) -> AudioBuffer {
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        AudioBuffer::new(s, sr).unwrap()
    }

    #[test]
    fn preemphasis_cases() {
        let x = AudioBuffer::new(vec![1.0, 1.0, 1.0], 24_000).unwrap();
        let y = preemphasize(&x, 0.97);
        assert_eq!(y.samples[0], 1.0);
        assert!((y.samples[1] - 0.03).abs() < 1e-15);
        assert!((y.samples[2] - 0.03).abs() < 1e-15);
        assert_eq!(preemphasize(&x, 0.0), x);
        assert!(preemphasize(&AudioBuffer::silence(0, 24_000), 0.97).is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = preemphasize(&AudioBuffer::new(raw.clone(), 24_000).unwrap(), 0.97);
        for n in 1..100 {
            assert_eq!(y.samples[n], raw[n] - 0.97 * raw[n - 1]);
        }
        let back = deemphasize(&y, 0.97);
        for (a, b) in back.samples.iter().zip(&raw) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_counts() {
        let cfg = AnalysisConfig::default();
        assert_eq!(cfg.frame_len(), 600);
        assert_eq!(cfg.hop_len(), 240);
        let one_sec = AudioBuffer::silence(24_000, 24_000);
        assert_eq!(frame_signal(&one_sec, &cfg).unwrap().len(), 98);
        assert_eq!(frame_signal(&AudioBuffer::silence(599, 24_000), &cfg).unwrap().len(), 0);
        assert_eq!(frame_signal(&AudioBuffer::silence(600, 24_000), &cfg).unwrap().len(), 1);
    }

    #[test]
    fn mel_shape_and_floor() {
        let cfg = AnalysisConfig::default();
        let mel = mel_spectrogram(&sine(440.0, 0.5, 24_000, 24_000), &cfg).unwrap();
        assert_eq!(mel.n_frames(), 98);
        assert!(mel.frames.iter().all(|r| r.len() == 80));

        let zero = mel_spectrogram(&AudioBuffer::silence(24_000, 24_000), &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(zero.frames.iter().flatten().all(|&v| v == floor));
    }

    #[test]
    fn mel_peak_in_band_of_tone() {
        let cfg = AnalysisConfig::default();
        let bank = MelFilterbank::new(&cfg);
        let allowed = bank.bands_containing(1000.0);
        assert!(!allowed.is_empty());
        let mel = mel_spectrogram(&sine(1000.0, 0.5, 24_000, 24_000), &cfg).unwrap();
        for row in &mel.frames {
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(allowed.contains(&arg), "argmax {arg} not in {allowed:?}");
        }
    }

    #[test]
    fn filterbank_rows_sum_to_one() {
        for n_mels in [1, 32, 80] {
            let bank = MelFilterbank::new(&AnalysisConfig::default().with_n_mels(n_mels));
            for row in &bank.weights {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn silence_cases() {
        let cfg = AnalysisConfig::default();
        let tone = sine(300.0, 0.5, 24_000, 24_000);
        assert_eq!(silence_mask(&tone, &cfg, -40.0).unwrap().silent_count(), 0);

        let mut s = tone.samples.clone();
        s.extend(std::iter::repeat(0.0).take(12_000));
        let padded = AudioBuffer::new(s, 24_000).unwrap();
        let mask = silence_mask(&padded, &cfg, -40.0).unwrap();
        let first_all_zero = 24_000usize.div_ceil(240);
        assert!(mask.0[first_all_zero..].iter().all(|&b| b));

        let mut s = sine(300.0, 1.0, 12_000, 24_000).samples;
        s.extend(sine(300.0, 0.001, 12_000, 24_000).samples.iter().map(|v| -v));
        let quiet = AudioBuffer::new(s, 24_000).unwrap();
        let mask = silence_mask(&quiet, &cfg, -40.0).unwrap();
        for (k, &silent) in mask.0.iter().enumerate() {
            let (start, end) = (k * 240, k * 240 + 600);
            if start >= 12_000 {
                assert!(silent, "frame {k}");
            } else if end <= 12_000 {
                assert!(!silent, "frame {k}");
            }
        }
        assert!(silence_mask(&quiet, &cfg, 3.0).is_err());
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let cfg = AnalysisConfig::default();
        let audio = AudioBuffer::silence(16_000, 16_000);
        assert!(matches!(
            mel_spectrogram(&audio, &cfg),
            Err(SignalError::SampleRateMismatch { .. })
        ));
    }
}
