//! Frame-wise F0 estimation: autocorrelation, YIN-style CMND and cepstral peak
//! picking, combined by a per-frame quorum vote.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::PitchError;
use crate::signal::{hann, AnalysisConfig, AudioBuffer, SilenceMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    pub fmin_search: f64,
    pub fmax_search: f64,
    pub yin_threshold: f64,
    /// Minimum normalized autocorrelation peak for a voiced frame.
    pub autocorr_threshold: f64,
    /// Minimum cepstral peak prominence (in standard deviations of the search band).
    pub cepstral_prominence: f64,
    pub voicing_quorum: usize,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            fmin_search: 50.0,
            fmax_search: 500.0,
            yin_threshold: 0.15,
            autocorr_threshold: 0.3,
            cepstral_prominence: 6.0,
            voicing_quorum: 2,
        }
    }
}

impl PitchConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<(), PitchError> {
        if !(0.0 < self.fmin_search && self.fmin_search < self.fmax_search && self.fmax_search < sample_rate as f64 / 2.0) {
            return Err(PitchError::InvalidConfig("need 0 < fmin < fmax < sample_rate/2".into()));
        }
        if self.voicing_quorum == 0 || self.voicing_quorum > 3 {
            return Err(PitchError::InvalidConfig("voicing quorum must be 1..=3".into()));
        }
        Ok(())
    }

    fn lag_range(&self, sample_rate: u32, frame_len: usize) -> (usize, usize) {
        let sr = sample_rate as f64;
        let lo = ((sr / self.fmax_search).floor() as usize).max(2);
        let hi = ((sr / self.fmin_search).ceil() as usize).min(frame_len.saturating_sub(2));
        (lo, hi)
    }
}

/// Per-frame F0 in Hz; `None` on unvoiced frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchContour {
    pub f0: Vec<Option<f64>>,
    pub hop_sec: f64,
    pub frame_sec: f64,
}

impl PitchContour {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced(&self) -> Vec<bool> {
        self.f0.iter().map(Option::is_some).collect()
    }

    pub fn voiced_count(&self) -> usize {
        self.f0.iter().flatten().count()
    }

    pub fn voiced_values(&self) -> Vec<f64> {
        self.f0.iter().flatten().copied().collect()
    }

    /// Forces every frame flagged silent to unvoiced.
    pub fn mask_silence(&mut self, mask: &SilenceMask) {
        for (f, &silent) in self.f0.iter_mut().zip(&mask.0) {
            if silent {
                *f = None;
            }
        }
    }

    /// `time_sec<TAB>f0_hz<TAB>voiced` per frame, time at the frame centre.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (k, f) in self.f0.iter().enumerate() {
            let t = k as f64 * self.hop_sec + self.frame_sec / 2.0;
            match f {
                Some(hz) => out.push_str(&format!("{t:.4}\t{hz:.3}\t1\n")),
                None => out.push_str(&format!("{t:.4}\t0\t0\n")),
            }
        }
        out
    }
}

fn frames<'a>(audio: &'a AudioBuffer, analysis: &AnalysisConfig) -> impl Iterator<Item = &'a [f64]> {
    let (len, hop) = (analysis.frame_len(), analysis.hop_len());
    (0..analysis.frame_count(audio.len())).map(move |k| &audio.samples[k * hop..k * hop + len])
}

fn contour(f0: Vec<Option<f64>>, analysis: &AnalysisConfig) -> PitchContour {
    PitchContour {
        f0,
        hop_sec: analysis.hop_len() as f64 / analysis.sample_rate as f64,
        frame_sec: analysis.frame_len() as f64 / analysis.sample_rate as f64,
    }
}

fn check(audio: &AudioBuffer, analysis: &AnalysisConfig, config: &PitchConfig) -> Result<(), PitchError> {
    analysis.validate()?;
    if audio.sample_rate != analysis.sample_rate {
        return Err(crate::error::SignalError::SampleRateMismatch {
            expected: analysis.sample_rate,
            found: audio.sample_rate,
        }
        .into());
    }
    config.validate(analysis.sample_rate)
}

/// Vertex offset of the parabola through `(−1, a), (0, b), (1, c)`, in `[-0.5, 0.5]`.
fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-300 {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    }
}

fn to_hz(lag: f64, sample_rate: u32, config: &PitchConfig) -> Option<f64> {
    let hz = sample_rate as f64 / lag;
    (config.fmin_search..=config.fmax_search).contains(&hz).then_some(hz)
}

fn demean(frame: &[f64]) -> Vec<f64> {
    let mean = frame.iter().sum::<f64>() / frame.len() as f64;
    frame.iter().map(|s| s - mean).collect()
}

/// Normalized autocorrelation `r(τ) / sqrt(E_head(τ) E_tail(τ))` for `τ in 0..=max_lag`.
fn normalized_autocorr(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i] * x[i];
    }
    (0..=max_lag)
        .map(|lag| {
            let r: f64 = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
            let head = prefix[n - lag];
            let tail = prefix[n] - prefix[lag];
            let denom = (head * tail).sqrt();
            if denom > 0.0 {
                r / denom
            } else {
                0.0
            }
        })
        .collect()
}

/// Lag of the strongest normalized autocorrelation peak in the search band.
///
/// Among interior local maxima, the shortest lag reaching 90% of the best one
/// wins, which keeps period multiples from being chosen.
pub fn estimate_autocorr(audio: &AudioBuffer, analysis: &AnalysisConfig, config: &PitchConfig) -> Result<PitchContour, PitchError> {
    check(audio, analysis, config)?;
    let (lo, hi) = config.lag_range(analysis.sample_rate, analysis.frame_len());
    let f0 = frames(audio, analysis)
        .map(|frame| {
            let x = demean(frame);
            let r = normalized_autocorr(&x, hi + 1);
            let peaks: Vec<usize> = (lo..=hi).filter(|&t| r[t] > r[t - 1] && r[t] >= r[t + 1]).collect();
            let best = peaks.iter().map(|&t| r[t]).fold(f64::NEG_INFINITY, f64::max);
            let lag = *peaks.iter().find(|&&t| r[t] >= 0.9 * best)?;
            if r[lag] < config.autocorr_threshold {
                return None;
            }
            let refined = lag as f64 + parabolic_offset(r[lag - 1], r[lag], r[lag + 1]);
            to_hz(refined, analysis.sample_rate, config)
        })
        .collect();
    Ok(contour(f0, analysis))
}

/// Cumulative mean normalized difference; `d'(0) = 1`.
pub fn cmnd(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![1.0; max_lag + 1];
    let mut running = 0.0;
    for lag in 1..=max_lag {
        let d = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (n - lag) as f64;
        running += d;
        out[lag] = if running > 0.0 { d * lag as f64 / running } else { 1.0 };
    }
    out
}

/// First CMND dip below the threshold, refined to its local minimum and
/// interpolated parabolically.
pub fn estimate_yin(audio: &AudioBuffer, analysis: &AnalysisConfig, config: &PitchConfig) -> Result<PitchContour, PitchError> {
    check(audio, analysis, config)?;
    let (lo, hi) = config.lag_range(analysis.sample_rate, analysis.frame_len());
    let f0 = frames(audio, analysis)
        .map(|frame| {
            let d = cmnd(frame, hi + 1);
            let mut lag = (lo..=hi).find(|&t| d[t] < config.yin_threshold)?;
            while lag < hi && d[lag + 1] < d[lag] {
                lag += 1;
            }
            let refined = lag as f64 + parabolic_offset(d[lag - 1], d[lag], d[lag + 1]);
            to_hz(refined, analysis.sample_rate, config)
        })
        .collect();
    Ok(contour(f0, analysis))
}

/// Real cepstrum peak within the search band's quefrency range.
pub fn estimate_cepstral(audio: &AudioBuffer, analysis: &AnalysisConfig, config: &PitchConfig) -> Result<PitchContour, PitchError> {
    check(audio, analysis, config)?;
    let size = analysis.fft_size;
    let (lo, hi) = config.lag_range(analysis.sample_rate, analysis.frame_len());
    let hi = hi.min(size / 2 - 1);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let window = hann(analysis.frame_len());
    let mut buf = vec![Complex::default(); size];
    let f0 = frames(audio, analysis)
        .map(|frame| {
            buf.iter_mut().for_each(|c| *c = Complex::default());
            for (i, (s, w)) in frame.iter().zip(&window).enumerate() {
                buf[i].re = s * w;
            }
            fwd.process(&mut buf);
            let peak = buf.iter().map(|c| c.norm()).fold(0.0, f64::max);
            if peak <= 0.0 {
                return None;
            }
            let floor = peak * 1e-6;
            for c in buf.iter_mut() {
                *c = Complex::new(c.norm().max(floor).ln(), 0.0);
            }
            inv.process(&mut buf);
            let ceps: Vec<f64> = buf.iter().map(|c| c.re / size as f64).collect();
            let band = &ceps[lo..=hi];
            let mean = band.iter().sum::<f64>() / band.len() as f64;
            let sd = (band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / band.len() as f64).sqrt();
            let q = (lo..=hi).max_by(|&a, &b| ceps[a].total_cmp(&ceps[b]))?;
            if sd <= 0.0 || (ceps[q] - mean) / sd < config.cepstral_prominence {
                return None;
            }
            let refined = q as f64 + parabolic_offset(ceps[q - 1], ceps[q], ceps[q + 1]);
            to_hz(refined, analysis.sample_rate, config)
        })
        .collect();
    Ok(contour(f0, analysis))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Voiced iff at least `voicing_quorum` estimators are voiced; F0 is the median
/// of the voiced estimates.
pub fn vote_pitch(tracks: [&PitchContour; 3], config: &PitchConfig) -> Result<PitchContour, PitchError> {
    let lens: Vec<usize> = tracks.iter().map(|t| t.len()).collect();
    if lens.iter().any(|&l| l != lens[0]) {
        return Err(PitchError::LengthMismatch(lens));
    }
    let f0 = (0..lens[0])
        .map(|k| {
            let mut voiced: Vec<f64> = tracks.iter().filter_map(|t| t.f0[k]).collect();
            (voiced.len() >= config.voicing_quorum).then(|| median(&mut voiced))
        })
        .collect();
    Ok(PitchContour { f0, hop_sec: tracks[0].hop_sec, frame_sec: tracks[0].frame_sec })
}

/// Runs all three estimators, forces `mask`-silent frames unvoiced, and votes.
pub fn track_pitch(
    audio: &AudioBuffer,
    analysis: &AnalysisConfig,
    config: &PitchConfig,
    mask: Option<&SilenceMask>,
) -> Result<PitchContour, PitchError> {
    let mut tracks = [
        estimate_autocorr(audio, analysis, config)?,
        estimate_yin(audio, analysis, config)?,
        estimate_cepstral(audio, analysis, config)?,
    ];
    if let Some(mask) = mask {
        tracks.iter_mut().for_each(|t| t.mask_silence(mask));
    }
    vote_pitch([&tracks[0], &tracks[1], &tracks[2]], config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const SR: u32 = 24_000;

    fn tone(freq: f64, n: usize) -> AudioBuffer {
        AudioBuffer::new((0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SR as f64).sin()).collect(), SR).unwrap()
    }

    fn square(freq: f64, n: usize) -> AudioBuffer {
        AudioBuffer::new(
            (0..n).map(|i| if (2.0 * PI * freq * i as f64 / SR as f64).sin() >= 0.0 { 0.5 } else { -0.5 }).collect(),
            SR,
        )
        .unwrap()
    }

    fn pulse_train(freq: f64, n: usize) -> AudioBuffer {
        let k_max = (0.45 * SR as f64 / freq) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| (1..=k_max).map(|k| (2.0 * PI * freq * k as f64 * i as f64 / SR as f64).cos()).sum::<f64>() / k_max as f64)
                .collect(),
            SR,
        )
        .unwrap()
    }

    fn noise(n: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), SR).unwrap()
    }

    fn unvoiced_fraction(c: &PitchContour) -> f64 {
        1.0 - c.voiced_count() as f64 / c.len() as f64
    }

    fn all_within(c: &PitchContour, target: f64, tol: f64) {
        assert!(!c.is_empty());
        for f in &c.f0 {
            let f = f.expect("voiced");
            assert!((f - target).abs() <= tol, "{f} vs {target}");
        }
    }

    #[test]
    fn autocorr_cases() {
        let (a, p) = (AnalysisConfig::default(), PitchConfig::default());
        all_within(&estimate_autocorr(&tone(200.0, SR as usize), &a, &p).unwrap(), 200.0, 2.0);
        assert!(unvoiced_fraction(&estimate_autocorr(&noise(SR as usize, 1), &a, &p).unwrap()) >= 0.9);
        assert_eq!(estimate_autocorr(&AudioBuffer::silence(SR as usize, SR), &a, &p).unwrap().voiced_count(), 0);
    }

    #[test]
    fn yin_cases() {
        let (a, p) = (AnalysisConfig::default(), PitchConfig::default());
        all_within(&estimate_yin(&tone(200.0, SR as usize), &a, &p).unwrap(), 200.0, 1.0);
        all_within(&estimate_yin(&square(100.0, SR as usize), &a, &p).unwrap(), 100.0, 1.0);
        assert!(unvoiced_fraction(&estimate_yin(&noise(SR as usize, 2), &a, &p).unwrap()) >= 0.9);
    }

    #[test]
    fn cepstral_cases() {
        let (a, p) = (AnalysisConfig::default(), PitchConfig::default());
        all_within(&estimate_cepstral(&pulse_train(200.0, SR as usize), &a, &p).unwrap(), 200.0, 4.0);
        assert!(unvoiced_fraction(&estimate_cepstral(&tone(4000.0, SR as usize), &a, &p).unwrap()) > 0.5);
        assert_eq!(estimate_cepstral(&AudioBuffer::silence(SR as usize, SR), &a, &p).unwrap().voiced_count(), 0);
    }

    #[test]
    fn estimators_track_octave_shift() {
        let (a, p) = (AnalysisConfig::default(), PitchConfig::default());
        for base in [110.0, 160.0, 220.0] {
            let lo = tone(base, 12_000);
            let hi = tone(2.0 * base, 12_000);
            for est in [estimate_autocorr, estimate_yin] {
                let m = |c: PitchContour| {
                    let v = c.voiced_values();
                    v.iter().sum::<f64>() / v.len() as f64
                };
                let ratio = m(est(&hi, &a, &p).unwrap()) / m(est(&lo, &a, &p).unwrap());
                assert!((ratio - 2.0).abs() <= 0.04, "{base}: {ratio}");
            }
            let ratio = estimate_cepstral(&pulse_train(2.0 * base, 12_000), &a, &p).unwrap().voiced_values()[3]
                / estimate_cepstral(&pulse_train(base, 12_000), &a, &p).unwrap().voiced_values()[3];
            assert!((ratio - 2.0).abs() <= 0.04, "cepstral {base}: {ratio}");
        }
    }

    fn single(f0: Option<f64>) -> PitchContour {
        PitchContour { f0: vec![f0], hop_sec: 0.01, frame_sec: 0.025 }
    }

    #[test]
    fn vote_cases() {
        let p = PitchConfig::default();
        let (a, b, c) = (single(Some(200.0)), single(Some(200.0)), single(Some(200.0)));
        assert_eq!(vote_pitch([&a, &b, &c], &p).unwrap().f0, vec![Some(200.0)]);
        let (a, b, c) = (single(Some(200.0)), single(Some(201.0)), single(Some(400.0)));
        assert_eq!(vote_pitch([&a, &b, &c], &p).unwrap().f0, vec![Some(201.0)]);
        let (a, b, c) = (single(Some(200.0)), single(None), single(None));
        assert_eq!(vote_pitch([&a, &b, &c], &p).unwrap().f0, vec![None]);
        let long = PitchContour { f0: vec![None; 2], hop_sec: 0.01, frame_sec: 0.025 };
        assert!(matches!(vote_pitch([&a, &long, &c], &p), Err(PitchError::LengthMismatch(_))));
    }

    #[test]
    fn output_lengths_match_frame_count() {
        let (a, p) = (AnalysisConfig::default(), PitchConfig::default());
        for n in [0, 599, 600, 12_345] {
            let audio = tone(180.0, n);
            let expect = a.frame_count(n);
            assert_eq!(estimate_autocorr(&audio, &a, &p).unwrap().len(), expect);
            assert_eq!(estimate_yin(&audio, &a, &p).unwrap().len(), expect);
            assert_eq!(estimate_cepstral(&audio, &a, &p).unwrap().len(), expect);
        }
    }

    #[test]
    fn tsv_dump() {
        let c = PitchContour { f0: vec![Some(200.0), None], hop_sec: 0.01, frame_sec: 0.025 };
        assert_eq!(c.to_tsv(), "0.0125\t200.000\t1\n0.0225\t0\t0\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_track() -> impl Strategy<Value = Option<f64>> {
            prop::option::of(60.0f64..480.0)
        }

        proptest! {
            #[test]
            fn vote_is_bounded_and_permutation_invariant(a in arb_track(), b in arb_track(), c in arb_track()) {
                let p = PitchConfig::default();
                let (ta, tb, tc) = (single(a), single(b), single(c));
                let v = vote_pitch([&ta, &tb, &tc], &p).unwrap();
                for perm in [[&tb, &ta, &tc], [&tc, &tb, &ta], [&ta, &tc, &tb], [&tb, &tc, &ta]] {
                    prop_assert_eq!(&vote_pitch(perm, &p).unwrap().f0, &v.f0);
                }
                if let Some(f) = v.f0[0] {
                    let vals: Vec<f64> = [a, b, c].iter().flatten().copied().collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(lo <= f && f <= hi);
                }
            }
        }
    }
}
