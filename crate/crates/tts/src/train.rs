//! Datasets, the Adam optimizer and the training loop.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use prosody_core::corpus::CorpusManifest;
use prosody_core::features::{extract_prosody, fit_norm_stats, normalize, parse_alignment, ExtractConfig};
use prosody_core::signal::mel_spectrogram;
use prosody_core::wav::read_wav;
use prosody_core::{FeatureError, NormStats, ProsodyVector};

use crate::error::TtsError;
use crate::model::{Example, Model, ModelConfig, ProsodySource, PHONE_ENCODER};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Training examples with the statistics used to normalize their prosody.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub utt_ids: Vec<String>,
    pub examples: Vec<Example>,
    /// Extracted (unnormalized) prosody per utterance.
    pub raw: Vec<ProsodyVector>,
    pub stats: NormStats,
}

/// Mel frames of one utterance in model units.
pub fn mel_target(audio: &prosody_core::AudioBuffer, config: &ModelConfig) -> Result<Tensor, TtsError> {
    let mel = mel_spectrogram(audio, &config.analysis)?;
    let rows: Vec<Vec<f64>> = mel.frames.iter().map(|f| f.iter().map(|&v| config.to_model_units(v)).collect()).collect();
    if rows.is_empty() {
        return Err(TtsError::EmptySequence);
    }
    Ok(Tensor::from_rows(&rows))
}

struct Loaded {
    mel: Tensor,
    raw: ProsodyVector,
}

impl Dataset {
    /// Loads audio and alignments, extracts prosody, fits normalization
    /// statistics over the whole corpus and computes mel targets. Work is
    /// split over `threads`; the result does not depend on the thread count.
    pub fn from_corpus(manifest: &CorpusManifest, config: &ModelConfig, extract: &ExtractConfig, threads: usize) -> Result<Self, TtsError> {
        let n = manifest.entries.len();
        if n == 0 {
            return Err(TtsError::EmptySequence);
        }
        let threads = threads.clamp(1, n);
        let mut slots: Vec<Option<Result<Loaded, TtsError>>> = (0..n).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (c, chunk) in slots.chunks_mut(n.div_ceil(threads)).enumerate() {
                let base = c * n.div_ceil(threads);
                scope.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        let entry = &manifest.entries[base + i];
                        *slot = Some((|| {
                            let audio = read_wav(manifest.wav_path(entry)).map_err(FeatureError::from)?;
                            let alignment = parse_alignment(manifest.alignment_path(entry))?;
                            let raw = extract_prosody(&audio, &alignment, extract)?;
                            let mel = mel_target(&audio, config)?;
                            Ok(Loaded { mel, raw })
                        })());
                    }
                });
            }
        });
        let loaded = slots.into_iter().map(|s| s.expect("every slot filled")).collect::<Result<Vec<_>, _>>()?;
        let raw: Vec<ProsodyVector> = loaded.iter().map(|l| l.raw).collect();
        let stats = fit_norm_stats(&raw, &extract.config_hash())?;
        Self::assemble(manifest, loaded, stats)
    }

    /// Like [`Dataset::from_corpus`] but with fixed statistics.
    pub fn from_corpus_with_stats(
        manifest: &CorpusManifest,
        config: &ModelConfig,
        extract: &ExtractConfig,
        stats: NormStats,
    ) -> Result<Self, TtsError> {
        let mut loaded = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let audio = read_wav(manifest.wav_path(entry)).map_err(FeatureError::from)?;
            let alignment = parse_alignment(manifest.alignment_path(entry))?;
            let raw = extract_prosody(&audio, &alignment, extract)?;
            loaded.push(Loaded { mel: mel_target(&audio, config)?, raw });
        }
        Self::assemble(manifest, loaded, stats)
    }

    fn assemble(manifest: &CorpusManifest, loaded: Vec<Loaded>, stats: NormStats) -> Result<Self, TtsError> {
        let mut examples = Vec::with_capacity(loaded.len());
        let mut raw = Vec::with_capacity(loaded.len());
        for (entry, l) in manifest.entries.iter().zip(loaded) {
            examples.push(Example { phone_ids: entry.phone_ids.clone(), mel: l.mel, prosody: normalize(&l.raw, &stats).to_array() });
            raw.push(l.raw);
        }
        Ok(Self { utt_ids: manifest.entries.iter().map(|e| e.utt_id.clone()).collect(), examples, raw, stats })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Mean frame over all utterances, in model units.
    pub fn mean_frame(&self) -> Vec<f64> {
        let n_mels = self.examples[0].mel.cols;
        let mut sum = vec![0.0; n_mels];
        let mut count = 0usize;
        for ex in &self.examples {
            for r in 0..ex.mel.rows {
                sum.iter_mut().zip(ex.mel.row_slice(r)).for_each(|(s, v)| *s += v);
            }
            count += ex.mel.rows;
        }
        sum.iter().map(|s| s / count as f64).collect()
    }

    /// The first `n` examples, with the same statistics.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            utt_ids: self.utt_ids[..n].to_vec(),
            examples: self.examples[..n].to_vec(),
            raw: self.raw[..n].to_vec(),
            stats: self.stats.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub steps: u64,
    pub seed: u64,
    /// Also back-propagate the prosody loss alone and record the largest
    /// gradient it sends into the phone encoder.
    pub audit_stop_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            steps: 6000,
            seed: 11,
            audit_stop_gradient: false,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub mel_l1: f64,
    pub stop_bce: f64,
    pub prosody_mse: f64,
    pub attention_guide: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub log: StepLog,
    pub loss: f64,
    pub decoder_prosody_source: ProsodySource,
    /// Largest |∂ prosody_mse / ∂θ| over phone-encoder parameters, when audited.
    pub phone_encoder_prosody_grad: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
    queue: Vec<Vec<usize>>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let sizes: Vec<usize> = model.params().ids().map(|id| model.params().get(id).len()).collect();
        let adam = Adam { m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 };
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self { model, config, adam, rng, step: 0, queue: Vec::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// `(seed, word position)` of the training random stream.
    pub fn rng_state(&self) -> ([u8; 32], u128) {
        (self.rng.get_seed(), self.rng.get_word_pos())
    }

    pub fn restore(&mut self, step: u64, seed: [u8; 32], word_pos: u128) {
        self.step = step;
        self.rng = ChaCha8Rng::from_seed(seed);
        self.rng.set_word_pos(word_pos);
        self.queue.clear();
    }

    /// Next batch of example indices. Each epoch sorts utterances by jittered
    /// length, cuts the order into batches and shuffles the batches.
    pub fn next_batch(&mut self, data: &Dataset) -> Vec<usize> {
        if self.queue.is_empty() {
            let mut keyed: Vec<(f64, usize)> =
                (0..data.len()).map(|i| (data.examples[i].mel.rows as f64 * (1.0 + 0.2 * self.rng.gen::<f64>()), i)).collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
            self.queue = order.chunks(self.config.batch_size.max(1)).map(<[usize]>::to_vec).collect();
            self.queue.shuffle(&mut self.rng);
        }
        self.queue.pop().expect("non-empty queue")
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepReport, TtsError> {
        let step = self.step + 1;
        let tg = self.model.training_graph(batch, &mut self.rng, ProsodySource::GroundTruth)?;
        let g = &tg.graph;
        let scalar = |v| g.value(v).data[0];
        let (loss, mel_l1, stop_bce, prosody_mse) = (scalar(tg.loss), scalar(tg.mel_l1), scalar(tg.stop_bce), scalar(tg.prosody_mse));
        let attention_guide = scalar(tg.attention_guide);
        if !loss.is_finite() || g.first_non_finite().is_some() {
            return Err(TtsError::Divergence { step, what: "forward pass".into() });
        }
        let audit = if self.config.audit_stop_gradient {
            let grads = g.backward(tg.prosody_mse)?;
            let max = self
                .model
                .params()
                .with_prefix(PHONE_ENCODER)
                .filter_map(|id| grads.param(id))
                .flat_map(|gr| gr.iter().map(|v| v.abs()))
                .fold(0.0, f64::max);
            Some(max)
        } else {
            None
        };
        let grads = g.backward(tg.loss)?;
        let ids: Vec<ParamId> = self.model.params().ids().collect();
        let mut sq = 0.0;
        for &id in &ids {
            if let Some(gr) = grads.param(id) {
                sq += gr.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(TtsError::Divergence { step, what: "gradients".into() });
        }
        let scale = if grad_norm > self.config.clip_norm { self.config.clip_norm / grad_norm } else { 1.0 };
        let c = &self.config;
        self.adam.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.adam.t);
        let bc2 = 1.0 - c.beta2.powi(self.adam.t);
        let owned: Vec<Option<Vec<f64>>> = ids.iter().map(|&id| grads.param(id).map(<[f64]>::to_vec)).collect();
        drop(tg);
        for (k, &id) in ids.iter().enumerate() {
            let Some(gr) = &owned[k] else { continue };
            let (m, v) = (&mut self.adam.m[k], &mut self.adam.v[k]);
            let p = self.model.params_mut().get_mut(id);
            for i in 0..gr.len() {
                let gi = gr[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                p.data[i] -= c.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon);
            }
            if !p.all_finite() {
                return Err(TtsError::Divergence { step, what: self.model.params().name(id).to_string() });
            }
        }
        self.step = step;
        Ok(StepReport {
            log: StepLog { step, mel_l1, stop_bce, prosody_mse, attention_guide, grad_norm },
            loss,
            decoder_prosody_source: ProsodySource::GroundTruth,
            phone_encoder_prosody_grad: audit,
        })
    }

    /// Trains until `config.steps` or `deadline`, appending one JSON line per
    /// step to `log`.
    pub fn run(&mut self, data: &Dataset, mut log: Option<&mut dyn Write>, deadline: Option<Instant>) -> Result<Vec<StepReport>, TtsError> {
        let mut reports = Vec::new();
        while self.step < self.config.steps {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                break;
            }
            let idx = self.next_batch(data);
            let batch: Vec<Example> = idx.iter().map(|&i| data.examples[i].clone()).collect();
            let report = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&report.log)?).map_err(|e| TtsError::Io { path: "<training log>".into(), source: e })?;
            }
            reports.push(report);
        }
        Ok(reports)
    }
}
