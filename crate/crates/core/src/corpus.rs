//! Parametric source-filter renderer and synthetic corpus generator.
//!
//! Each utterance is a sum of harmonics of a slowly varying F0, shaped per
//! phone by a two-formant envelope and globally by a one-pole tilt filter,
//! then scaled so its energy over non-silent frames hits the requested level.
//! Because every parameter is chosen, the corpus carries exact ground-truth
//! prosody for the feature extractor and the TTS model.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::features::{mean_log_duration, tilt_over_frames, ExtractConfig, PhoneAlignment, PhoneSegment, ProsodyVector, Space};
use crate::pitch::track_pitch;
use crate::signal::{silence_mask, AudioBuffer};
use crate::wav::write_wav;

pub const SILENCE_LABEL: &str = "sil";
pub const PAUSE_LABEL: &str = "sp";

/// Phone inventory; id 0 is always silence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    labels: Vec<String>,
}

impl Vocabulary {
    /// `sil` followed by `AA`, `BB`, ... (`A1`, `B1`, ... past 26 letters).
    pub fn synthetic(size: usize) -> Result<Self, CorpusError> {
        if size < 2 {
            return Err(CorpusError::Range(format!("vocabulary size {size}, need at least 2")));
        }
        let mut labels = vec![SILENCE_LABEL.to_string()];
        for i in 0..size - 1 {
            let c = (b'A' + (i % 26) as u8) as char;
            labels.push(if i < 26 { format!("{c}{c}") } else { format!("{c}{}", i / 26) });
        }
        Ok(Self { labels })
    }

    pub fn from_labels(labels: Vec<String>) -> Result<Self, CorpusError> {
        if labels.is_empty() {
            return Err(CorpusError::Range("empty vocabulary".into()));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Maps labels to ids, or returns every label that is not in the inventory.
    pub fn encode<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<usize>, Vec<String>> {
        let mut ids = Vec::with_capacity(labels.len());
        let mut unknown = Vec::new();
        for l in labels {
            match self.id(l.as_ref()) {
                Some(id) => ids.push(id),
                None => unknown.push(l.as_ref().to_string()),
            }
        }
        if unknown.is_empty() {
            Ok(ids)
        } else {
            Err(unknown)
        }
    }

    /// One label per line.
    pub fn to_text(&self) -> String {
        self.labels.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        Self::from_labels(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?)
    }
}

/// Prosody and content of one synthetic utterance. `phone_ids` are the spoken
/// phones only (ids `1..vocab_size`); silences are added by the renderer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub phone_ids: Vec<usize>,
    pub f0_mean: f64,
    pub f0_range_factor: f64,
    pub phone_dur_ms: f64,
    pub energy_db: f64,
    pub tilt: f64,
    pub seed: u64,
}

/// Renderer settings and the parameter ranges it accepts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RendererConfig {
    pub vocab_size: usize,
    pub edge_silence_ms: f64,
    pub pause_probability: f64,
    /// Per-phone log-duration jitter half-width; the jitter is centred so the
    /// mean log duration is exactly `ln(phone_dur_ms)`.
    pub duration_jitter: f64,
    pub ramp_ms: f64,
    /// Source harmonic `k` has amplitude `k^-source_rolloff` before filtering.
    pub source_rolloff: f64,
    pub f0_hz: (f64, f64),
    pub range_factor: (f64, f64),
    pub phone_dur_ms: (f64, f64),
    pub energy_db: (f64, f64),
    pub tilt: (f64, f64),
    /// Analysis used to measure and correct the rendered tilt.
    pub extract: ExtractConfig,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            edge_silence_ms: 100.0,
            pause_probability: 0.2,
            duration_jitter: 0.15,
            ramp_ms: 2.0,
            source_rolloff: 0.6,
            f0_hz: (60.0, 450.0),
            range_factor: (1.0, 2.0),
            phone_dur_ms: (20.0, 400.0),
            energy_db: (-40.0, -10.0),
            tilt: (-0.999, -0.05),
            extract: ExtractConfig::default(),
        }
    }
}

impl RendererConfig {
    fn sample_rate(&self) -> u32 {
        self.extract.analysis.sample_rate
    }

    fn hop_ms(&self) -> f64 {
        self.extract.analysis.hop_ms
    }

    pub fn validate(&self, spec: &UtteranceSpec) -> Result<(), CorpusError> {
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && lo <= v && v <= hi {
                Ok(())
            } else {
                Err(CorpusError::Range(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        check("f0_mean", spec.f0_mean, self.f0_hz)?;
        let p = &self.extract.pitch;
        let band = (spec.f0_mean / spec.f0_range_factor.sqrt(), spec.f0_mean * spec.f0_range_factor.sqrt());
        if band.0 < p.fmin_search || band.1 > p.fmax_search {
            return Err(CorpusError::Range(format!(
                "F0 span [{:.1}, {:.1}] Hz leaves the pitch search band [{}, {}]",
                band.0, band.1, p.fmin_search, p.fmax_search
            )));
        }
        check("f0_range_factor", spec.f0_range_factor, self.range_factor)?;
        check("phone_dur_ms", spec.phone_dur_ms, (self.phone_dur_ms.0.max(2.0 * self.hop_ms()), self.phone_dur_ms.1))?;
        check("energy_db", spec.energy_db, self.energy_db)?;
        check("tilt", spec.tilt, self.tilt)?;
        if spec.phone_ids.is_empty() {
            return Err(CorpusError::Range("no phones".into()));
        }
        if let Some(&bad) = spec.phone_ids.iter().find(|&&id| id == 0 || id >= self.vocab_size) {
            return Err(CorpusError::Range(format!("phone id {bad} outside 1..{}", self.vocab_size)));
        }
        Ok(())
    }
}

/// A rendered utterance with its exact segmentation and ground truth.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub audio: AudioBuffer,
    pub alignment: PhoneAlignment,
    pub ground_truth: ProsodyVector,
    /// Tilt filter pole actually used.
    pub rho: f64,
}

struct Formant {
    freq: f64,
    bandwidth: f64,
    gain: f64,
}

/// Two-formant envelope, fixed per phone id.
fn phone_envelope(phone_id: usize) -> [Formant; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + phone_id as u64);
    let mut f = |lo: f64, hi: f64, bw: (f64, f64)| Formant {
        freq: rng.gen_range(lo..hi),
        bandwidth: rng.gen_range(bw.0..bw.1),
        gain: rng.gen_range(1.0..3.0),
    };
    [f(300.0, 900.0, (80.0, 160.0)), f(900.0, 2500.0, (120.0, 240.0))]
}

fn envelope_gain(formants: &[Formant; 2], hz: f64) -> f64 {
    1.0 + formants.iter().map(|f| f.gain / (1.0 + ((hz - f.freq) / f.bandwidth).powi(2))).sum::<f64>()
}

fn tilt_gain(rho: f64, omega: f64) -> f64 {
    1.0 / (1.0 - 2.0 * rho * omega.cos() + rho * rho).sqrt()
}

/// Timeline of one utterance in samples.
struct Layout {
    alignment: PhoneAlignment,
    /// (start, end, phone id) of spoken phones, in samples.
    phones: Vec<(usize, usize, usize)>,
    total: usize,
}

fn layout(spec: &UtteranceSpec, config: &RendererConfig, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Layout {
    let sr = config.sample_rate() as f64;
    let n = spec.phone_ids.len();
    let mut jitter: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0) * config.duration_jitter).collect();
    let mean = jitter.iter().sum::<f64>() / n as f64;
    jitter.iter_mut().for_each(|j| *j -= mean);
    // shrink the jitter until every phone stays at least two hops long
    let min_ln = (2.0 * config.hop_ms()).ln() - spec.phone_dur_ms.ln();
    let lowest = jitter.iter().cloned().fold(0.0, f64::min);
    if lowest < min_ln {
        let scale = if lowest < 0.0 { (min_ln / lowest).max(0.0) } else { 0.0 };
        jitter.iter_mut().for_each(|j| *j *= scale);
    }
    let pause = config.hop_ms() / 1000.0;
    let edge = config.edge_silence_ms / 1000.0;

    let mut segments = vec![PhoneSegment { label: SILENCE_LABEL.into(), start: 0.0, end: edge }];
    let mut t = edge;
    let mut phones = Vec::with_capacity(n);
    let to_sample = |t: f64| (t * sr).round() as usize;
    for (i, (&id, j)) in spec.phone_ids.iter().zip(&jitter).enumerate() {
        let d = spec.phone_dur_ms / 1000.0 * j.exp();
        segments.push(PhoneSegment { label: vocab.label(id).unwrap_or("?").into(), start: t, end: t + d });
        phones.push((to_sample(t), to_sample(t + d), id));
        t += d;
        if i + 1 < n && rng.gen_bool(config.pause_probability) {
            segments.push(PhoneSegment { label: PAUSE_LABEL.into(), start: t, end: t + pause });
            t += pause;
        }
    }
    segments.push(PhoneSegment { label: SILENCE_LABEL.into(), start: t, end: t + edge });
    let total = to_sample(t + edge);
    Layout { alignment: PhoneAlignment { segments }, phones, total }
}

/// Harmonic amplitudes and F0 at one instant.
struct Source<'a> {
    spec: &'a UtteranceSpec,
    layout: &'a Layout,
    sr: f64,
    envelopes: Vec<[Formant; 2]>,
    harmonics: usize,
    rolloff: f64,
}

impl<'a> Source<'a> {
    fn new(spec: &'a UtteranceSpec, layout: &'a Layout, sr: f64, rolloff: f64) -> Self {
        let envelopes = (0..layout.phones.len()).map(|i| phone_envelope(layout.phones[i].2)).collect();
        let f0_min = spec.f0_mean / spec.f0_range_factor.sqrt();
        let harmonics = (Self::CUTOFF * sr / f0_min).floor() as usize;
        Self { spec, layout, sr, envelopes, harmonics, rolloff }
    }

    const TAPER_START: f64 = 0.42;
    const CUTOFF: f64 = 0.46;

    fn voiced_span(&self) -> (usize, usize) {
        (self.layout.phones[0].0, self.layout.phones.last().unwrap().1)
    }

    fn f0(&self, n: usize) -> f64 {
        let (a, b) = self.voiced_span();
        let u = ((n as f64 - a as f64) / (b - a).max(1) as f64).clamp(0.0, 1.0);
        (self.spec.f0_mean.ln() + 0.5 * self.spec.f0_range_factor.ln() * (PI * u).cos()).exp()
    }

    fn phone_at(&self, n: usize) -> usize {
        self.layout.phones.iter().rposition(|p| p.0 <= n).unwrap_or(0)
    }

    fn amplitudes(&self, n: usize, rho: f64, out: &mut [f64]) {
        let f0 = self.f0(n);
        let env = &self.envelopes[self.phone_at(n)];
        for (k, a) in out.iter_mut().enumerate() {
            let hz = (k + 1) as f64 * f0;
            let rel = hz / self.sr;
            let taper = ((Self::CUTOFF - rel) / (Self::CUTOFF - Self::TAPER_START)).clamp(0.0, 1.0);
            *a = if taper > 0.0 { taper * envelope_gain(env, hz) * tilt_gain(rho, 2.0 * PI * rel) / ((k + 1) as f64).powf(self.rolloff) } else { 0.0 };
        }
    }

    /// Analytic `-r1/r0` of the harmonic spectrum averaged over hop-spaced instants.
    fn predicted_tilt(&self, rho: f64, hop: usize) -> f64 {
        let mut amps = vec![0.0; self.harmonics];
        let (mut sum, mut count) = (0.0, 0);
        for &(a, b, _) in &self.layout.phones {
            for n in (a..b).step_by(hop) {
                self.amplitudes(n, rho, &mut amps);
                let f0 = self.f0(n);
                let (mut num, mut den) = (0.0, 0.0);
                for (k, a) in amps.iter().enumerate() {
                    let p = a * a;
                    num += p * (2.0 * PI * (k + 1) as f64 * f0 / self.sr).cos();
                    den += p;
                }
                sum -= num / den;
                count += 1;
            }
        }
        sum / count as f64
    }

    /// Unit-gain waveform with tilt pole `rho`.
    fn render(&self, rho: f64, phases: &[f64], ramp: usize) -> Vec<f64> {
        const BLOCK: usize = 48;
        let mut out = vec![0.0; self.layout.total];
        let (start, end) = self.voiced_span();
        let rot: Vec<(f64, f64)> = phases.iter().map(|p| (p.cos(), p.sin())).collect();
        let mut a0 = vec![0.0; self.harmonics];
        let mut a1 = vec![0.0; self.harmonics];
        let mut phase = 0.0f64;
        let mut block_start = start;
        self.amplitudes(block_start, rho, &mut a0);
        while block_start < end {
            let block_end = (block_start + BLOCK).min(end);
            self.amplitudes(block_end, rho, &mut a1);
            for n in block_start..block_end {
                let frac = (n - block_start) as f64 / BLOCK as f64;
                phase = (phase + 2.0 * PI * self.f0(n) / self.sr) % (2.0 * PI);
                let (c, s) = (phase.cos(), phase.sin());
                let (mut zr, mut zi) = (c, s);
                let mut acc = 0.0;
                for k in 0..self.harmonics {
                    let amp = a0[k] + frac * (a1[k] - a0[k]);
                    if amp != 0.0 {
                        // Im(e^{i phi_k} z)
                        acc += amp * (rot[k].0 * zi + rot[k].1 * zr);
                    }
                    let nr = zr * c - zi * s;
                    zi = zr * s + zi * c;
                    zr = nr;
                }
                out[n] = acc;
            }
            std::mem::swap(&mut a0, &mut a1);
            block_start = block_end;
        }
        // voicing gates: silent pauses between merged phone runs, ramps at every edge
        let mut gate = vec![0.0; out.len()];
        for &(a, b, _) in &self.layout.phones {
            gate[a..b].iter_mut().for_each(|g| *g = 1.0);
        }
        let mut n = 0;
        while n < gate.len() {
            if gate[n] == 0.0 {
                n += 1;
                continue;
            }
            let run_start = n;
            while n < gate.len() && gate[n] > 0.0 {
                n += 1;
            }
            let len = n - run_start;
            for i in 0..len {
                let edge = i.min(len - 1 - i) as f64;
                gate[run_start + i] = (edge / ramp.max(1) as f64).min(1.0);
            }
        }
        out.iter_mut().zip(&gate).for_each(|(x, g)| *x *= g);
        out
    }
}

fn bisect_rho(source: &Source, target: f64, hop: usize) -> Result<f64, CorpusError> {
    let (mut lo, mut hi) = (-0.95, 0.9995);
    let (t_lo, t_hi) = (source.predicted_tilt(lo, hop), source.predicted_tilt(hi, hop));
    if !(t_hi <= target && target <= t_lo) {
        return Err(CorpusError::Range(format!("tilt {target} not reachable (renderer spans [{t_hi:.4}, {t_lo:.4}])")));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if source.predicted_tilt(mid, hop) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn measured_tilt(samples: &[f64], config: &RendererConfig) -> Option<f64> {
    let audio = AudioBuffer::new(samples.to_vec(), config.sample_rate()).ok()?;
    let ex = &config.extract;
    let mask = silence_mask(&audio, &ex.analysis, ex.silence_threshold_db).ok()?;
    let contour = track_pitch(&audio, &ex.analysis, &ex.pitch, Some(&mask)).ok()?;
    tilt_over_frames(&audio, &contour.voiced(), &ex.analysis)
}

/// Renders an utterance and reports its ground-truth prosody.
pub fn render_detailed(spec: &UtteranceSpec, config: &RendererConfig) -> Result<Rendered, CorpusError> {
    config.validate(spec)?;
    let vocab = Vocabulary::synthetic(config.vocab_size)?;
    let analysis = &config.extract.analysis;
    let sr = config.sample_rate() as f64;
    let hop = analysis.hop_len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = layout(spec, config, &vocab, &mut rng);
    let source = Source::new(spec, &layout, sr, config.source_rolloff);
    let phases: Vec<f64> = (0..source.harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let ramp = (config.ramp_ms / 1000.0 * sr).round() as usize;

    let mut rho = bisect_rho(&source, spec.tilt, hop)?;
    let mut samples = source.render(rho, &phases, ramp);
    // one measured correction absorbs windowing and transition effects
    if let Some(measured) = measured_tilt(&samples, config) {
        let corrected = spec.tilt + (source.predicted_tilt(rho, hop) - measured);
        if let Ok(r) = bisect_rho(&source, corrected, hop) {
            rho = r;
            samples = source.render(rho, &phases, ramp);
        }
    }

    let unit = AudioBuffer::new(samples, config.sample_rate())?;
    let mask = silence_mask(&unit, analysis, config.extract.silence_threshold_db)?;
    let level = crate::features::utterance_energy(&unit, &mask, analysis)
        .map_err(|e| CorpusError::Range(format!("cannot calibrate energy: {e}")))?;
    let audio = unit.scaled(10f64.powf((spec.energy_db - level) / 20.0));
    let peak = audio.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak >= 1.0 {
        return Err(CorpusError::Range(format!("energy {} dB clips (peak {peak:.3})", spec.energy_db)));
    }

    let log_duration = mean_log_duration(&layout.alignment, &config.extract.exclude_labels)
        .map_err(|e| CorpusError::Range(e.to_string()))?;
    let ground_truth = ProsodyVector {
        log_pitch: spec.f0_mean.ln(),
        log_pitch_range: spec.f0_range_factor.ln() * (0.05 * PI).cos(),
        log_duration,
        energy_db: spec.energy_db,
        spectral_tilt: spec.tilt,
        space: Space::Raw,
    };
    Ok(Rendered { audio, alignment: layout.alignment, ground_truth, rho })
}

pub fn render_utterance(spec: &UtteranceSpec, config: &RendererConfig) -> Result<(AudioBuffer, PhoneAlignment), CorpusError> {
    render_detailed(spec, config).map(|r| (r.audio, r.alignment))
}

/// Sampling ranges for corpus generation. F0 and phone duration are drawn
/// log-uniformly, the rest uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub size: usize,
    pub seed: u64,
    pub min_phones: usize,
    pub max_phones: usize,
    pub f0_hz: (f64, f64),
    pub range_factor: (f64, f64),
    pub phone_dur_ms: (f64, f64),
    pub energy_db: (f64, f64),
    pub tilt: (f64, f64),
    pub renderer: RendererConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 500,
            seed: 7,
            min_phones: 5,
            max_phones: 15,
            f0_hz: (190.0, 330.0),
            range_factor: (1.05, 1.5),
            phone_dur_ms: (55.0, 150.0),
            energy_db: (-30.0, -16.0),
            tilt: (-0.99, -0.93),
            renderer: RendererConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn vocabulary(&self) -> Result<Vocabulary, CorpusError> {
        Vocabulary::synthetic(self.renderer.vocab_size)
    }

    /// Deterministic utterance specs, one per corpus entry.
    pub fn specs(&self) -> Result<Vec<UtteranceSpec>, CorpusError> {
        if self.size == 0 {
            return Err(CorpusError::EmptyCorpus);
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return Err(CorpusError::Range(format!("phone count range [{}, {}]", self.min_phones, self.max_phones)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let log_uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| rng.gen_range(lo.ln()..=hi.ln()).exp();
        let specs = (0..self.size)
            .map(|_| {
                let n = rng.gen_range(self.min_phones..=self.max_phones);
                UtteranceSpec {
                    phone_ids: (0..n).map(|_| rng.gen_range(1..self.renderer.vocab_size)).collect(),
                    f0_mean: log_uniform(&mut rng, self.f0_hz),
                    f0_range_factor: rng.gen_range(self.range_factor.0..=self.range_factor.1),
                    phone_dur_ms: log_uniform(&mut rng, self.phone_dur_ms),
                    energy_db: rng.gen_range(self.energy_db.0..=self.energy_db.1),
                    tilt: rng.gen_range(self.tilt.0..=self.tilt.1),
                    seed: rng.gen(),
                }
            })
            .collect();
        Ok(specs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Paths relative to the corpus directory.
    pub wav: String,
    pub alignment: String,
    /// Model input: spoken phones framed by leading and trailing silence.
    pub phone_ids: Vec<usize>,
    pub ground_truth: ProsodyVector,
    pub spec: UtteranceSpec,
}

/// A generated corpus on disk: `manifest.jsonl`, `corpus.json`, `vocab.txt`,
/// `wav/` and `align/`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub config: CorpusConfig,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "corpus.json";
pub const VOCAB_FILE: &str = "vocab.txt";

impl CorpusManifest {
    pub fn wav_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.wav)
    }

    pub fn alignment_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.alignment)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, CorpusError> {
        Vocabulary::load(self.root.join(VOCAB_FILE))
    }

    pub fn ground_truth(&self) -> Vec<ProsodyVector> {
        self.entries.iter().map(|e| e.ground_truth).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("entry serialize") + "\n").collect()
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let root = root.as_ref().to_path_buf();
        let read = |name: &str| {
            let path = root.join(name);
            fs::read_to_string(&path).map_err(|source| CorpusError::Io { path, source })
        };
        let config: CorpusConfig = serde_json::from_str(&read(CONFIG_FILE)?)?;
        let entries = read(MANIFEST_FILE)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self { root, config, entries })
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CorpusError> {
    fs::write(path, text).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// Renders the whole corpus under `out_dir`. Rendering runs on `threads`
/// workers; the manifest is assembled in utterance order.
pub fn generate_corpus(config: &CorpusConfig, out_dir: impl AsRef<Path>, threads: usize) -> Result<CorpusManifest, CorpusError> {
    let specs = config.specs()?;
    let vocab = config.vocabulary()?;
    let root = out_dir.as_ref().to_path_buf();
    for dir in [root.clone(), root.join("wav"), root.join("align")] {
        fs::create_dir_all(&dir).map_err(|source| CorpusError::Io { path: dir.clone(), source })?;
    }

    let threads = threads.max(1).min(specs.len());
    let mut slots: Vec<Option<Result<ManifestEntry, CorpusError>>> = (0..specs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks = slots.chunks_mut(specs.len().div_ceil(threads));
        let mut offset = 0;
        for chunk in chunks {
            let base = offset;
            offset += chunk.len();
            let (specs, vocab, root) = (&specs, &vocab, &root);
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(render_entry(base + i, &specs[base + i], config, vocab, root));
                }
            });
        }
    });
    let entries = slots.into_iter().map(|s| s.expect("every slot rendered")).collect::<Result<Vec<_>, _>>()?;

    let manifest = CorpusManifest { root: root.clone(), config: config.clone(), entries };
    write_file(&root.join(MANIFEST_FILE), &manifest.to_jsonl())?;
    write_file(&root.join(CONFIG_FILE), &serde_json::to_string_pretty(config)?)?;
    write_file(&root.join(VOCAB_FILE), &vocab.to_text())?;
    Ok(manifest)
}

fn render_entry(index: usize, spec: &UtteranceSpec, config: &CorpusConfig, vocab: &Vocabulary, root: &Path) -> Result<ManifestEntry, CorpusError> {
    let utt_id = format!("utt_{index:04}");
    let rendered = render_detailed(spec, &config.renderer)?;
    let wav = format!("wav/{utt_id}.wav");
    let alignment = format!("align/{utt_id}.tsv");
    write_wav(root.join(&wav), &rendered.audio)?;
    write_file(&root.join(&alignment), &rendered.alignment.to_tsv())?;
    let sil = vocab.id(SILENCE_LABEL).unwrap_or(0);
    let mut phone_ids = vec![sil];
    phone_ids.extend(&spec.phone_ids);
    phone_ids.push(sil);
    Ok(ManifestEntry { utt_id, wav, alignment, phone_ids, ground_truth: rendered.ground_truth, spec: spec.clone() })
}
