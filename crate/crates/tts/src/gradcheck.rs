//! Central-difference gradient checks.
//!
//! For each parameter tensor the analytic gradient `a` is compared with the
//! numerical gradient `n` as `‖a - n‖ / max(‖a‖, ‖n‖)`. A per-element ratio is
//! dominated by entries that are zero up to rounding, so the norm form is
//! used; tensors whose gradients are both below 1e-10 count as exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use prosody_core::AnalysisConfig;

use crate::error::TtsError;
use crate::graph::{Graph, Var};
use crate::layers::{Linear, LstmCell, LstmState};
use crate::model::{Example, Model, ModelConfig, ProsodySource, StepAttention};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub tensors: Vec<TensorError>,
    /// Scalar parameters perturbed.
    pub checked: usize,
}

/// Compares analytic and central-difference gradients of `loss` over every
/// parameter in the store that `store` exposes.
pub fn check_gradients<S>(
    state: &mut S,
    store: impl Fn(&mut S) -> &mut ParamStore,
    loss: impl Fn(&S) -> Result<(Graph, Var), TtsError>,
) -> Result<GradCheckReport, TtsError> {
    let (g, l) = loss(state)?;
    let grads = g.backward(l)?;
    let ids: Vec<_> = store(state).ids().collect();
    let analytic: Vec<Option<Vec<f64>>> = ids.iter().map(|&id| grads.param(id).map(<[f64]>::to_vec)).collect();
    drop(g);
    let eval = |s: &S| -> Result<f64, TtsError> {
        let (g, l) = loss(s)?;
        Ok(g.value(l).data[0])
    };
    let mut tensors = Vec::new();
    let mut checked = 0;
    for (k, &id) in ids.iter().enumerate() {
        let n = store(state).get(id).len();
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let orig = store(state).get(id).data[i];
            store(state).get_mut(id).data[i] = orig + STEP;
            let up = eval(state)?;
            store(state).get_mut(id).data[i] = orig - STEP;
            let down = eval(state)?;
            store(state).get_mut(id).data[i] = orig;
            numeric[i] = (up - down) / (2.0 * STEP);
        }
        checked += n;
        let a = analytic[k].clone().unwrap_or_else(|| vec![0.0; n]);
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let relative_error = if scale < 1e-10 { 0.0 } else { diff / scale };
        tensors.push(TensorError { name: store(state).name(id).to_string(), relative_error, analytic_norm: na });
    }
    let max_relative_error = tensors.iter().map(|t| t.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_relative_error, tensors, checked })
}

/// Modules that can be checked in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Linear,
    LstmCell,
    PhoneEncoder,
    ProsodyEncoder,
    AttentionStep,
    DecoderStep,
    /// Total training loss of a small batch.
    TrainLoss,
}

impl Module {
    pub const ALL: [Module; 7] =
        [Module::Linear, Module::LstmCell, Module::PhoneEncoder, Module::ProsodyEncoder, Module::AttentionStep, Module::DecoderStep, Module::TrainLoss];

    /// Tolerance on the relative error; the full loss is deeper and gets a looser bound.
    pub fn tolerance(self) -> f64 {
        match self {
            Module::TrainLoss => 1e-3,
            _ => 1e-4,
        }
    }
}

/// Layer widths of the models built for checking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySizes {
    pub batch: usize,
    pub input: usize,
    pub hidden: usize,
    pub seq_len: usize,
    pub n_mels: usize,
}

impl Default for ToySizes {
    fn default() -> Self {
        Self { batch: 2, input: 4, hidden: 3, seq_len: 4, n_mels: 3 }
    }
}

pub fn toy_config(s: &ToySizes, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        embedding_dim: s.input,
        encoder_hidden: s.hidden,
        prosody_lstm_layers: 3,
        prosody_hidden: s.hidden,
        decoder_hidden: s.hidden + 2,
        prenet_dims: vec![4, 3],
        n_mels: s.n_mels,
        attention_dim: 4,
        location_filters: 2,
        location_width: 3,
        analysis: AnalysisConfig { n_mels: s.n_mels, fmax: 3000.0, ..AnalysisConfig::default() },
        // Finite differences see through the stop-gradient on fed-back frames.
        self_feed_prob: 0.0,
        seed,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// `Σ y ⊙ w` for fixed random `w`; a generic scalar readout.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let w = g.constant(random(&mut ChaCha8Rng::seed_from_u64(seed), r, c, 1.0));
    let p = g.mul(y, w);
    g.sum(p)
}

fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Random previous attention weights over `t` positions, summing to 1.
fn random_alpha(rng: &mut ChaCha8Rng, rows: usize, t: usize) -> Tensor {
    let mut a = Tensor::zeros(rows, t);
    for r in 0..rows {
        let w: Vec<f64> = (0..t).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        a.data[r * t..(r + 1) * t].iter_mut().zip(&w).for_each(|(d, x)| *d = x / s);
    }
    a
}

/// Moves the zero-initialized pre-net biases off the ReLU kink. With a zero
/// go frame or a fully dropped layer the pre-activation would otherwise sit
/// exactly at 0, where finite differences see half the slope.
fn offset_prenet_biases(model: &mut Model, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.params().with_prefix("decoder.prenet").filter(|&id| model.params().name(id).ends_with(".b")).collect();
    for id in ids {
        for v in &mut model.params_mut().get_mut(id).data {
            *v = if rng.gen::<bool>() { 1.0 } else { -1.0 } * rng.gen_range(0.2..0.6);
        }
    }
}

/// Builds `module` at `sizes` from `seed` and checks its gradients.
pub fn gradient_check(module: Module, sizes: &ToySizes, seed: u64) -> Result<GradCheckReport, TtsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match module {
        Module::Linear => {
            let mut store = ParamStore::new();
            let layer = Linear::new(&mut store, "linear", sizes.input, sizes.hidden, &mut rng);
            store.get_mut(layer.b).data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            let x = random(&mut rng, sizes.batch, sizes.input, 1.0);
            check_gradients(&mut store, |s| s, |s| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = layer.forward(&mut g, s, xv);
                let y = g.tanh(y);
                let l = readout(&mut g, y, seed);
                Ok((g, l))
            })
        }
        Module::LstmCell => {
            let mut store = ParamStore::new();
            let cell = LstmCell::new(&mut store, "cell", sizes.input, sizes.hidden, &mut rng);
            let xs: Vec<Tensor> = (0..sizes.seq_len).map(|_| random(&mut rng, sizes.batch, sizes.input, 1.0)).collect();
            let c0 = random(&mut rng, sizes.batch, sizes.hidden, 0.5);
            check_gradients(&mut store, |s| s, |s| {
                let mut g = Graph::new();
                let mut st = cell.zero_state(&mut g, sizes.batch);
                st = LstmState { h: st.h, c: g.constant(c0.clone()) };
                for x in &xs {
                    let xv = g.constant(x.clone());
                    st = cell.step(&mut g, s, xv, st);
                }
                let a = readout(&mut g, st.h, seed);
                let b = readout(&mut g, st.c, seed + 1);
                let l = g.add(a, b);
                Ok((g, l))
            })
        }
        Module::PhoneEncoder | Module::ProsodyEncoder => {
            let cfg = toy_config(sizes, seed);
            let mut model = Model::new(cfg)?;
            let batch: Vec<Vec<usize>> =
                (0..sizes.batch).map(|b| random_ids(&mut rng, sizes.seq_len - b.min(sizes.seq_len - 1), 6)).collect();
            check_gradients(&mut model, |m| m.params_mut(), |m| {
                let mut g = Graph::new();
                let ids: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
                let y = if module == Module::PhoneEncoder {
                    m.encode_graph(&mut g, &ids).outputs_var()
                } else {
                    m.prosody_graph_unblocked(&mut g, &ids)
                };
                let l = readout(&mut g, y, seed);
                Ok((g, l))
            })
        }
        Module::AttentionStep => {
            let cfg = toy_config(sizes, seed);
            let mut model = Model::new(cfg)?;
            let t = sizes.seq_len;
            let lengths: Vec<usize> = (0..sizes.batch).map(|b| t - b.min(t - 1)).collect();
            let enc = random(&mut rng, sizes.batch * t, 2 * sizes.hidden, 1.0);
            let h = random(&mut rng, sizes.batch, sizes.hidden + 2, 1.0);
            let alpha = random_alpha(&mut rng, sizes.batch, t);
            let cum = random(&mut rng, sizes.batch, t, 1.0);
            check_gradients(&mut model, |m| m.params_mut(), |m| {
                let mut g = Graph::new();
                let ev = m.encoder_vars_from(&mut g, enc.clone(), &lengths);
                let hv = g.constant(h.clone());
                let av = g.constant(alpha.clone());
                let cv = g.constant(cum.clone());
                let p = m.attention_graph(&mut g, &ev, hv, av, cv, None);
                let a = g.monotonic_attention(p, av, &lengths);
                let ctx = g.attend(a, ev.outputs_var());
                let l1 = readout(&mut g, ctx, seed);
                let l2 = readout(&mut g, a, seed + 1);
                let l = g.add(l1, l2);
                Ok((g, l))
            })
        }
        Module::DecoderStep => {
            let cfg = toy_config(sizes, seed);
            let mut model = Model::new(cfg)?;
            offset_prenet_biases(&mut model, &mut rng);
            let batch: Vec<Vec<usize>> = (0..sizes.batch).map(|_| random_ids(&mut rng, sizes.seq_len, 6)).collect();
            let prev = random(&mut rng, sizes.batch, sizes.n_mels, 1.0);
            let prosody = random(&mut rng, sizes.batch, 5, 1.0);
            check_gradients(&mut model, |m| m.params_mut(), |m| {
                let mut g = Graph::new();
                let ids: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
                let enc = m.encode_graph(&mut g, &ids);
                let mut state = m.initial_step_vars(&mut g, sizes.batch, sizes.seq_len);
                let pv = g.constant(prev.clone());
                let pr = g.constant(prosody.clone());
                let mut drng = ChaCha8Rng::seed_from_u64(seed);
                let mut total = None;
                // Two steps, so the location features see a non-trivial history.
                for k in 0..2 {
                    let dropout = m.dropout_masks(&mut g, sizes.batch, &mut drng);
                    let (f, s, next) = m.step_graph(&mut g, &enc, pv, pr, &state, &dropout, StepAttention::Soft { noise: None });
                    let a = readout(&mut g, f, seed + k);
                    let b = readout(&mut g, s, seed + 10 + k);
                    let ab = g.add(a, b);
                    total = Some(match total {
                        None => ab,
                        Some(t) => g.add(t, ab),
                    });
                    state = next;
                }
                Ok((g, total.expect("two steps")))
            })
        }
        Module::TrainLoss => {
            let cfg = toy_config(sizes, seed);
            let mut model = Model::new(cfg)?;
            offset_prenet_biases(&mut model, &mut rng);
            let examples: Vec<Example> = (0..sizes.batch)
                .map(|b| {
                    let len = sizes.seq_len - b.min(sizes.seq_len - 1);
                    let frames = 2 * len + 1 - b;
                    Example {
                        phone_ids: random_ids(&mut rng, len, 6),
                        mel: random(&mut rng, frames, sizes.n_mels, 1.0),
                        prosody: std::array::from_fn(|_| rng.gen_range(-0.9..0.9)),
                    }
                })
                .collect();
            check_gradients(&mut model, |m| m.params_mut(), |m| {
                let mut trng = ChaCha8Rng::seed_from_u64(seed);
                let tg = m.training_graph_with(&examples, &mut trng, ProsodySource::GroundTruth, false)?;
                Ok((tg.graph, tg.loss))
            })
        }
    }
}
