//! Mel inversion and Griffin-Lim phase reconstruction.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::VocoderError;
use crate::signal::{hann, AnalysisConfig, AudioBuffer, MelFilterbank, MelSpectrogram, Spectrum};

/// Non-negative STFT magnitudes, `fft_size/2 + 1` per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSpectrogram {
    pub frames: Vec<Vec<f64>>,
    pub config: AnalysisConfig,
}

/// Pseudo-inverse of a mel filterbank, cached per analysis config.
#[derive(Clone, Debug)]
pub struct MelInverter {
    config: AnalysisConfig,
    /// `n_bins × n_mels`, row-major.
    pinv: Vec<Vec<f64>>,
}

impl MelInverter {
    pub fn new(config: &AnalysisConfig) -> Result<Self, VocoderError> {
        config.validate()?;
        let bank = MelFilterbank::new(config);
        let (rows, cols) = (bank.n_mels(), config.n_bins());
        let m = DMatrix::from_fn(rows, cols, |r, c| bank.weights[r][c]);
        let p = m
            .pseudo_inverse(1e-10)
            .map_err(|e| VocoderError::ConfigMismatch(format!("filterbank not invertible: {e}")))?;
        let pinv = (0..cols).map(|c| (0..rows).map(|r| p[(c, r)]).collect()).collect();
        Ok(Self { config: config.clone(), pinv })
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.config
    }

    /// Largest absolute row sum of the pseudo-inverse; bounds the linear
    /// magnitude any constant mel level can map to.
    pub fn gain_bound(&self) -> f64 {
        self.pinv.iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn invert(&self, mel: &MelSpectrogram) -> Result<LinearSpectrogram, VocoderError> {
        if mel.config != self.config {
            return Err(VocoderError::ConfigMismatch("mel config differs from the inverter's".into()));
        }
        let n_mels = self.config.n_mels;
        if let Some(row) = mel.frames.iter().find(|r| r.len() != n_mels) {
            return Err(VocoderError::ConfigMismatch(format!("frame has {} mel bands, expected {n_mels}", row.len())));
        }
        let frames = mel
            .frames
            .iter()
            .map(|row| {
                let lin: Vec<f64> = row.iter().map(|v| v.exp()).collect();
                self.pinv
                    .iter()
                    .map(|p| p.iter().zip(&lin).map(|(a, b)| a * b).sum::<f64>().max(0.0))
                    .collect()
            })
            .collect();
        Ok(LinearSpectrogram { frames, config: self.config.clone() })
    }
}

/// Least-squares pseudo-inverse of the mel filterbank applied per frame, clamped at zero.
pub fn mel_to_linear(mel: &MelSpectrogram) -> Result<LinearSpectrogram, VocoderError> {
    MelInverter::new(&mel.config)?.invert(mel)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PhaseInit {
    Zero,
    Random(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GriffinLimOptions {
    pub iterations: usize,
    /// Magnitudes are raised to this power before reconstruction.
    pub power: f64,
    /// Peak level of the output; `None` keeps the reconstruction's own scale.
    pub peak: Option<f64>,
    pub init: PhaseInit,
}

impl Default for GriffinLimOptions {
    fn default() -> Self {
        Self { iterations: 50, power: 1.2, peak: Some(0.95), init: PhaseInit::Zero }
    }
}

struct Stft {
    config: AnalysisConfig,
    window: Vec<f64>,
    spectrum: Spectrum,
    inverse: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Stft {
    fn new(config: &AnalysisConfig) -> Self {
        Self {
            config: config.clone(),
            window: hann(config.frame_len()),
            spectrum: Spectrum::new(config.fft_size),
            inverse: FftPlanner::new().plan_fft_inverse(config.fft_size),
        }
    }

    fn forward(&mut self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let (len, hop) = (self.config.frame_len(), self.config.hop_len());
        let mut frame = vec![0.0; len];
        (0..self.config.frame_count(x.len()))
            .map(|k| {
                for (i, f) in frame.iter_mut().enumerate() {
                    *f = x[k * hop + i] * self.window[i];
                }
                self.spectrum.complex(&frame)
            })
            .collect()
    }

    /// Least-squares overlap-add inverse.
    fn inverse(&self, spec: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let (len, hop, size) = (self.config.frame_len(), self.config.hop_len(), self.config.fft_size);
        if spec.is_empty() {
            return Vec::new();
        }
        let total = (spec.len() - 1) * hop + len;
        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex::default(); size];
        for (k, bins) in spec.iter().enumerate() {
            buf[..bins.len()].copy_from_slice(bins);
            for i in 1..size - bins.len() + 1 {
                buf[size - i] = bins[i].conj();
            }
            self.inverse.process(&mut buf);
            for i in 0..len {
                let w = self.window[i];
                out[k * hop + i] += w * buf[i].re / size as f64;
                norm[k * hop + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-10 {
                *o /= n;
            }
        }
        out
    }
}

/// `‖S − |STFT(y)|‖ / ‖S‖` over all frames and bins.
pub fn spectral_convergence(target: &LinearSpectrogram, audio: &AudioBuffer) -> f64 {
    let mut stft = Stft::new(&target.config);
    let est = stft.forward(&audio.samples);
    let (mut num, mut den) = (0.0, 0.0);
    for (t, e) in target.frames.iter().zip(&est) {
        for (a, b) in t.iter().zip(e) {
            num += (a - b.norm()).powi(2);
            den += a * a;
        }
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

/// Reconstruction plus the spectral convergence after each iteration.
pub struct GriffinLimTrace {
    pub audio: AudioBuffer,
    pub convergence: Vec<f64>,
}

pub fn griffin_lim_with(spec: &LinearSpectrogram, options: &GriffinLimOptions, trace: bool) -> GriffinLimTrace {
    let sr = spec.config.sample_rate;
    if spec.frames.is_empty() {
        return GriffinLimTrace { audio: AudioBuffer::silence(0, sr), convergence: Vec::new() };
    }
    let mags: Vec<Vec<f64>> = spec.frames.iter().map(|r| r.iter().map(|m| m.max(0.0).powf(options.power)).collect()).collect();
    let target = LinearSpectrogram { frames: mags.clone(), config: spec.config.clone() };
    let mut stft = Stft::new(&spec.config);
    let mut phases: Vec<Vec<Complex<f64>>> = match options.init {
        PhaseInit::Zero => mags.iter().map(|r| vec![Complex::new(1.0, 0.0); r.len()]).collect(),
        PhaseInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            mags.iter()
                .map(|r| r.iter().map(|_| Complex::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU))).collect())
                .collect()
        }
    };
    let combine = |phases: &[Vec<Complex<f64>>]| -> Vec<Vec<Complex<f64>>> {
        mags.iter().zip(phases).map(|(m, p)| m.iter().zip(p).map(|(a, b)| b * *a).collect()).collect()
    };
    let mut y = stft.inverse(&combine(&phases));
    let mut convergence = Vec::new();
    for _ in 0..options.iterations {
        let est = stft.forward(&y);
        for (p, e) in phases.iter_mut().zip(&est) {
            for (pi, ei) in p.iter_mut().zip(e) {
                let n = ei.norm();
                *pi = if n > 1e-300 { ei / n } else { Complex::new(1.0, 0.0) };
            }
        }
        y = stft.inverse(&combine(&phases));
        if trace {
            convergence.push(spectral_convergence(&target, &AudioBuffer { samples: y.clone(), sample_rate: sr }));
        }
    }
    if let Some(peak) = options.peak {
        let max = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            y.iter_mut().for_each(|v| *v *= peak / max);
        }
    }
    GriffinLimTrace { audio: AudioBuffer { samples: y, sample_rate: sr }, convergence }
}

/// Iterative phase estimation with the default options; zero iterations gives
/// the zero-phase inverse. Output is peak-normalized to 0.95.
pub fn griffin_lim(spec: &LinearSpectrogram, iterations: usize) -> AudioBuffer {
    griffin_lim_with(spec, &GriffinLimOptions { iterations, ..Default::default() }, false).audio
}
