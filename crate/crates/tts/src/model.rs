//! Model definition, the batched training graph and autoregressive synthesis.
//!
//! Mel frames enter and leave the network in "model units":
//! `(ln mel - ln floor) / -ln floor`, so the floor (silence) maps to 0 and
//! typical speech frames land in `[0, 1]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use prosody_core::features::{Space, N_FEATURES};
use prosody_core::{AnalysisConfig, MelSpectrogram, ProsodyVector};

use crate::error::TtsError;
use crate::graph::{Graph, Var};
use crate::layers::{run_lstm, step_masks, Linear, LstmCell, LstmState};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PROSODY_DIM: usize = N_FEATURES;

/// Parameter-name prefixes, one per module.
pub const PHONE_ENCODER: &str = "phone_encoder.";
pub const PROSODY_ENCODER: &str = "prosody_encoder.";
pub const DECODER: &str = "decoder.";
pub const ATTENTION: &str = "attention.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// Per direction; encoder outputs are twice this wide.
    pub encoder_hidden: usize,
    pub prosody_lstm_layers: usize,
    pub prosody_hidden: usize,
    pub prosody_out_dim: usize,
    pub decoder_hidden: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub n_mels: usize,
    pub frames_per_step: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_width: usize,
    /// Initial offset of the attention energies; sigmoid(1.386) ≈ 0.8 keeps
    /// the focus in place four steps out of five at the start of training.
    pub attention_init_bias: f64,
    /// Standard deviation of the noise added to attention energies during training.
    pub attention_noise: f64,
    /// Weight of the diagonal attention guide in the training loss (0 disables it).
    pub guided_attention_weight: f64,
    /// Width of the guide's tolerance band, as a fraction of the utterance.
    pub guided_attention_width: f64,
    /// Probability, per utterance and decoder step in training, of feeding the
    /// decoder its own previous output (without gradient) instead of the
    /// target frame. Keeps the decoder from relying on ground-truth history it
    /// will not have at inference.
    pub self_feed_prob: f64,
    pub stop_init_bias: f64,
    pub analysis: AnalysisConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            embedding_dim: 64,
            encoder_hidden: 128,
            prosody_lstm_layers: 3,
            prosody_hidden: 128,
            prosody_out_dim: PROSODY_DIM,
            decoder_hidden: 256,
            prenet_dims: vec![128, 64],
            prenet_dropout: 0.5,
            n_mels: 32,
            frames_per_step: 2,
            attention_dim: 128,
            location_filters: 8,
            location_width: 15,
            attention_init_bias: 4f64.ln(),
            attention_noise: 1.0,
            guided_attention_weight: 1.0,
            guided_attention_width: 0.2,
            self_feed_prob: 0.25,
            stop_init_bias: -3.0,
            analysis: desk_analysis(),
            seed: 1,
        }
    }
}

/// Mel analysis of the 32-band desk model. The bands stop at 3 kHz so that
/// harmonics near F0 stay resolved after inversion.
pub fn desk_analysis() -> AnalysisConfig {
    AnalysisConfig { n_mels: 32, fmax: 3000.0, ..AnalysisConfig::default() }
}

impl ModelConfig {
    /// 80 bands over the full analysis band.
    pub fn full_band() -> Self {
        Self { n_mels: 80, analysis: AnalysisConfig::default(), ..Self::default() }
    }

    pub fn encoder_dim(&self) -> usize {
        2 * self.encoder_hidden
    }

    pub fn step_width(&self) -> usize {
        self.frames_per_step * self.n_mels
    }

    pub fn validate(&self) -> Result<(), TtsError> {
        let bad = |m: String| Err(TtsError::Config(m));
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("prosody_lstm_layers", self.prosody_lstm_layers),
            ("prosody_hidden", self.prosody_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("n_mels", self.n_mels),
            ("frames_per_step", self.frames_per_step),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
        ];
        for (name, v) in dims {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.prosody_out_dim != PROSODY_DIM {
            return bad(format!("prosody_out_dim must be {PROSODY_DIM}"));
        }
        if self.prenet_dims.is_empty() || self.prenet_dims.contains(&0) {
            return bad("prenet_dims must be non-empty and positive".into());
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return bad("prenet_dropout must lie in [0, 1)".into());
        }
        if self.location_width % 2 == 0 {
            return bad("location_width must be odd".into());
        }
        if self.analysis.n_mels != self.n_mels {
            return bad(format!("n_mels {} differs from the analysis config ({})", self.n_mels, self.analysis.n_mels));
        }
        if !(self.attention_noise >= 0.0) {
            return bad("attention_noise must be non-negative".into());
        }
        if !(self.guided_attention_weight >= 0.0) || !(self.guided_attention_width > 0.0) {
            return bad("guided attention weight must be non-negative and its width positive".into());
        }
        if !(0.0..=1.0).contains(&self.self_feed_prob) {
            return bad("self_feed_prob must lie in [0, 1]".into());
        }
        self.analysis.validate().map_err(|e| TtsError::Config(e.to_string()))
    }

    /// Log-mel value to model units.
    pub fn to_model_units(&self, log_mel: f64) -> f64 {
        let lf = self.analysis.log_floor.ln();
        (log_mel - lf) / -lf
    }

    pub fn from_model_units(&self, v: f64) -> f64 {
        let lf = self.analysis.log_floor.ln();
        v * -lf + lf
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: ParamId,
    enc_fwd: LstmCell,
    enc_bwd: LstmCell,
    prosody_lstm: Vec<LstmCell>,
    prosody_proj: Linear,
    prenet: Vec<Linear>,
    decoder_lstm: LstmCell,
    att_query: ParamId,
    att_memory: ParamId,
    att_conv: ParamId,
    att_location: ParamId,
    att_bias: ParamId,
    att_v: ParamId,
    att_r: ParamId,
    output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

/// Where the decoder's prosody vector comes from in a training graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProsodySource {
    GroundTruth,
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    /// The bias replaces the predicted vector.
    #[default]
    Absolute,
    /// `clip(predicted + bias, -1, 1)`.
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// One-hot focus that stays while the stay probability reaches 0.5 and
    /// otherwise moves one position forward.
    #[default]
    Hard,
    /// Expected monotonic alignment, as in training.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub mode: BiasMode,
    pub attention: AttentionMode,
    pub max_frames: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self { mode: BiasMode::Absolute, attention: AttentionMode::Hard, max_frames: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub predicted: ProsodyVector,
    pub applied: ProsodyVector,
    /// `max_frames` was reached before the stop token fired.
    pub truncated: bool,
    /// Attention weights over the input, one row per decoder step.
    pub alignments: Vec<Vec<f64>>,
    /// Argmax of each alignment row.
    pub attention_path: Vec<usize>,
    pub frames_per_step: usize,
}

impl Synthesis {
    /// Output frames attributed to each input position through the attention path.
    pub fn frames_per_phone(&self, n_phones: usize) -> Vec<usize> {
        let mut counts = vec![0; n_phones];
        for &j in &self.attention_path {
            counts[j] += self.frames_per_step;
        }
        counts
    }

    pub fn path_is_monotonic(&self) -> bool {
        self.attention_path.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Previous and cumulative attention weights over one input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub alpha: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl AttentionState {
    /// All weight on the first input position.
    pub fn initial(len: usize) -> Self {
        let mut alpha = vec![0.0; len];
        alpha[0] = 1.0;
        Self { alpha, cumulative: vec![0.0; len] }
    }
}

/// Encoder outputs of one utterance, ready for decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderMemory {
    /// `T × encoder_dim`.
    pub outputs: Tensor,
    /// `T × attention_dim` projection used by every attention step.
    pub keys: Tensor,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.outputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.rows == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub context: Vec<f64>,
    pub attention: AttentionState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput {
    /// `frames_per_step` frames of `n_mels` values, in model units.
    pub frames: Vec<Vec<f64>>,
    pub stop_logit: f64,
}

/// One training example: phone ids, target frames in model units and the
/// normalized ground-truth prosody vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub phone_ids: Vec<usize>,
    pub mel: Tensor,
    pub prosody: [f64; PROSODY_DIM],
}

/// A recorded training forward pass.
pub struct TrainingGraph {
    pub graph: Graph,
    pub loss: Var,
    pub mel_l1: Var,
    pub stop_bce: Var,
    pub prosody_mse: Var,
    /// Attention mass far from the diagonal, already weighted.
    pub attention_guide: Var,
    pub predicted_prosody: Var,
    /// The vector the decoder consumed at every step.
    pub decoder_prosody: Var,
    pub decoder_prosody_source: ProsodySource,
    /// `B × T` attention weights per decoder step.
    pub alignments: Vec<Var>,
}

pub(crate) struct EncoderVars {
    outputs: Var,
    keys: Var,
    lengths: Vec<usize>,
    steps: usize,
    /// Batch row of every `(b, t)` encoder row.
    row_batch: Vec<usize>,
}

impl EncoderVars {
    pub(crate) fn outputs_var(&self) -> Var {
        self.outputs
    }
}

pub(crate) struct StepVars {
    pub h: Var,
    pub c: Var,
    pub context: Var,
    pub alpha: Var,
    pub cumulative: Var,
}

pub(crate) enum StepAttention<'a> {
    Soft { noise: Option<Var> },
    Hard { previous: &'a [usize] },
}

fn check_prosody(v: &[f64]) -> Result<(), TtsError> {
    if v.len() != PROSODY_DIM {
        return Err(TtsError::ProsodyLength(v.len()));
    }
    for (index, &value) in v.iter().enumerate() {
        if !(-1.0..=1.0).contains(&value) {
            return Err(TtsError::ProsodyRange { index, value });
        }
    }
    Ok(())
}

/// Hard stepwise decision: stay at `from` while its stay probability reaches
/// 0.5, otherwise advance one position, never past the last valid one.
fn hard_focus(p: &[f64], from: usize, len: usize) -> usize {
    if p[from] >= 0.5 || from + 1 >= len {
        from
    } else {
        from + 1
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, TtsError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let c = &config;

        let embedding = {
            let limit = (3.0 / c.embedding_dim as f64).sqrt();
            let data = (0..c.vocab_size * c.embedding_dim).map(|_| rng.gen_range(-limit..limit)).collect();
            p.add(format!("{PHONE_ENCODER}embedding"), Tensor::new(c.vocab_size, c.embedding_dim, data))
        };
        let enc_fwd = LstmCell::new(&mut p, &format!("{PHONE_ENCODER}forward"), c.embedding_dim, c.encoder_hidden, &mut rng);
        let enc_bwd = LstmCell::new(&mut p, &format!("{PHONE_ENCODER}backward"), c.embedding_dim, c.encoder_hidden, &mut rng);

        let mut prosody_lstm = Vec::new();
        for layer in 0..c.prosody_lstm_layers {
            let input = if layer == 0 { c.embedding_dim } else { c.prosody_hidden };
            prosody_lstm.push(LstmCell::new(&mut p, &format!("{PROSODY_ENCODER}lstm{layer}"), input, c.prosody_hidden, &mut rng));
        }
        let prosody_proj = Linear::new(&mut p, &format!("{PROSODY_ENCODER}projection"), c.prosody_hidden, PROSODY_DIM, &mut rng);

        let mut prenet = Vec::new();
        let mut width = c.n_mels;
        for (i, &d) in c.prenet_dims.iter().enumerate() {
            prenet.push(Linear::new(&mut p, &format!("{DECODER}prenet{i}"), width, d, &mut rng));
            width = d;
        }
        let dec_in = width + PROSODY_DIM + c.encoder_dim();
        let decoder_lstm = LstmCell::new(&mut p, &format!("{DECODER}lstm"), dec_in, c.decoder_hidden, &mut rng);

        let att_query = p.add_glorot(format!("{ATTENTION}query"), c.decoder_hidden, c.attention_dim, &mut rng);
        let att_memory = p.add_glorot(format!("{ATTENTION}memory"), c.encoder_dim(), c.attention_dim, &mut rng);
        let att_conv = p.add_glorot(format!("{ATTENTION}location_conv"), c.location_filters, 2 * c.location_width, &mut rng);
        let att_location = p.add_glorot(format!("{ATTENTION}location_proj"), c.location_filters, c.attention_dim, &mut rng);
        let att_bias = p.add_zeros(format!("{ATTENTION}bias"), 1, c.attention_dim);
        let att_v = p.add_glorot(format!("{ATTENTION}v"), c.attention_dim, 1, &mut rng);
        let att_r = p.add(format!("{ATTENTION}r"), Tensor::scalar(c.attention_init_bias));

        let output = Linear::new(&mut p, &format!("{DECODER}output"), c.decoder_hidden + c.encoder_dim(), c.step_width() + 1, &mut rng);
        p.get_mut(output.b).data[c.step_width()] = c.stop_init_bias;

        let layout = Layout {
            embedding,
            enc_fwd,
            enc_bwd,
            prosody_lstm,
            prosody_proj,
            prenet,
            decoder_lstm,
            att_query,
            att_memory,
            att_conv,
            att_location,
            att_bias,
            att_v,
            att_r,
            output,
        };
        Ok(Self { config, params: p, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Starts the mel part of the output bias at `frame` (model units) so the
    /// untrained decoder already emits an average frame.
    pub fn set_output_bias(&mut self, frame: &[f64]) -> Result<(), TtsError> {
        if frame.len() != self.config.n_mels {
            return Err(TtsError::MelShape { expected: self.config.n_mels, found: frame.len() });
        }
        let nm = self.config.n_mels;
        let b = self.params.get_mut(self.layout.output.b);
        for k in 0..self.config.frames_per_step {
            b.data[k * nm..(k + 1) * nm].copy_from_slice(frame);
        }
        Ok(())
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<(), TtsError> {
        if ids.is_empty() {
            return Err(TtsError::EmptySequence);
        }
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(TtsError::OutOfVocabulary { id, vocab_size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    /// Per-step gathered embeddings of a padded batch.
    fn embed(&self, g: &mut Graph, table: Var, batch: &[&[usize]], steps: usize) -> Vec<Var> {
        (0..steps)
            .map(|t| {
                let ids: Vec<usize> = batch.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
                g.gather_rows(table, &ids)
            })
            .collect()
    }

    pub(crate) fn encode_graph(&self, g: &mut Graph, batch: &[&[usize]]) -> EncoderVars {
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let steps = *lengths.iter().max().expect("non-empty batch");
        let table = g.param(&self.params, self.layout.embedding);
        let xs = self.embed(g, table, batch, steps);
        let masks = step_masks(g, &lengths, steps);
        let (fwd, _) = run_lstm(g, &self.params, &self.layout.enc_fwd, &xs, &masks, false);
        let (bwd, _) = run_lstm(g, &self.params, &self.layout.enc_bwd, &xs, &masks, true);
        let per_step: Vec<Var> = (0..steps).map(|t| g.concat_cols(&[fwd[t], bwd[t]])).collect();
        let wide = g.concat_cols(&per_step);
        let outputs = g.reshape(wide, batch.len() * steps, self.config.encoder_dim());
        let wm = g.param(&self.params, self.layout.att_memory);
        let keys = g.matmul(outputs, wm);
        let row_batch = (0..batch.len()).flat_map(|b| std::iter::repeat(b).take(steps)).collect();
        EncoderVars { outputs, keys, lengths, steps, row_batch }
    }

    /// Prosody prediction from the phone embeddings, behind a stop-gradient.
    pub(crate) fn prosody_graph(&self, g: &mut Graph, batch: &[&[usize]]) -> Var {
        self.prosody_graph_with(g, batch, true)
    }

    /// The same function without the barrier, for gradient checking.
    pub(crate) fn prosody_graph_unblocked(&self, g: &mut Graph, batch: &[&[usize]]) -> Var {
        self.prosody_graph_with(g, batch, false)
    }

    fn prosody_graph_with(&self, g: &mut Graph, batch: &[&[usize]], barrier: bool) -> Var {
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let steps = *lengths.iter().max().expect("non-empty batch");
        let table = g.param(&self.params, self.layout.embedding);
        let source = if barrier { g.stop_gradient(table) } else { table };
        let mut xs = self.embed(g, source, batch, steps);
        let masks = step_masks(g, &lengths, steps);
        let mut last = None;
        for cell in &self.layout.prosody_lstm {
            let (outs, state) = run_lstm(g, &self.params, cell, &xs, &masks, false);
            xs = outs;
            last = Some(state.h);
        }
        let z = self.layout.prosody_proj.forward(g, &self.params, last.expect("at least one layer"));
        g.tanh(z)
    }

    pub(crate) fn attention_graph(&self, g: &mut Graph, enc: &EncoderVars, h: Var, alpha: Var, cumulative: Var, noise: Option<Var>) -> Var {
        let wq = g.param(&self.params, self.layout.att_query);
        let q = g.matmul(h, wq);
        let q = g.gather_rows(q, &enc.row_batch);
        let conv = g.param(&self.params, self.layout.att_conv);
        let loc = g.location_conv(alpha, cumulative, conv);
        let wl = g.param(&self.params, self.layout.att_location);
        let loc = g.matmul(loc, wl);
        let s = g.add(q, enc.keys);
        let s = g.add(s, loc);
        let bias = g.param(&self.params, self.layout.att_bias);
        let s = g.add_bias(s, bias);
        let s = g.tanh(s);
        let v = g.param(&self.params, self.layout.att_v);
        let e = g.matmul(s, v);
        let e = g.reshape(e, enc.lengths.len(), enc.steps);
        let r = g.param(&self.params, self.layout.att_r);
        let mut e = g.add_bias(e, r);
        if let Some(n) = noise {
            e = g.add(e, n);
        }
        g.sigmoid(e)
    }

    fn prenet_graph(&self, g: &mut Graph, frame: Var, dropout: &[Option<Var>]) -> Var {
        let mut x = frame;
        for (layer, mask) in self.layout.prenet.iter().zip(dropout) {
            let z = layer.forward(g, &self.params, x);
            x = g.relu(z);
            if let Some(m) = mask {
                x = g.mul(x, *m);
            }
        }
        x
    }

    /// Inverted-dropout masks for the pre-net, one per layer.
    pub(crate) fn dropout_masks(&self, g: &mut Graph, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Option<Var>> {
        let p = self.config.prenet_dropout;
        self.config
            .prenet_dims
            .iter()
            .map(|&d| {
                (p > 0.0).then(|| {
                    let keep = 1.0 / (1.0 - p);
                    let data = (0..batch * d).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                    g.constant(Tensor::new(batch, d, data))
                })
            })
            .collect()
    }

    /// One decoder step: pre-net, recurrent update, attention, output.
    /// Returns `(frames B × r·n_mels, stop logits B × 1, new state)`.
    pub(crate) fn step_graph(
        &self,
        g: &mut Graph,
        enc: &EncoderVars,
        prev_frame: Var,
        prosody: Var,
        state: &StepVars,
        dropout: &[Option<Var>],
        attention: StepAttention<'_>,
    ) -> (Var, Var, StepVars) {
        let pre = self.prenet_graph(g, prev_frame, dropout);
        let x = g.concat_cols(&[pre, prosody, state.context]);
        let next = self.layout.decoder_lstm.step(g, &self.params, x, LstmState { h: state.h, c: state.c });
        let p = self.attention_graph(g, enc, next.h, state.alpha, state.cumulative, match attention {
            StepAttention::Soft { noise } => noise,
            StepAttention::Hard { .. } => None,
        });
        let alpha = match attention {
            StepAttention::Soft { .. } => g.monotonic_attention(p, state.alpha, &enc.lengths),
            StepAttention::Hard { previous } => {
                let pv = g.value(p).clone();
                let mut a = Tensor::zeros(pv.rows, pv.cols);
                for (b, &from) in previous.iter().enumerate() {
                    let j = hard_focus(pv.row_slice(b), from, enc.lengths[b]);
                    a.data[b * pv.cols + j] = 1.0;
                }
                g.constant(a)
            }
        };
        let context = g.attend(alpha, enc.outputs);
        let cumulative = g.add(state.cumulative, alpha);
        let hc = g.concat_cols(&[next.h, context]);
        let out = self.layout.output.forward(g, &self.params, hc);
        let width = self.config.step_width();
        let frames = g.slice_cols(out, 0, width);
        let stop = g.slice_cols(out, width, 1);
        (frames, stop, StepVars { h: next.h, c: next.c, context, alpha, cumulative })
    }

    pub(crate) fn initial_step_vars(&self, g: &mut Graph, batch: usize, steps: usize) -> StepVars {
        let h = g.constant(Tensor::zeros(batch, self.config.decoder_hidden));
        let c = g.constant(Tensor::zeros(batch, self.config.decoder_hidden));
        let context = g.constant(Tensor::zeros(batch, self.config.encoder_dim()));
        let mut a = Tensor::zeros(batch, steps);
        (0..batch).for_each(|b| a.data[b * steps] = 1.0);
        let alpha = g.constant(a);
        let cumulative = g.constant(Tensor::zeros(batch, steps));
        StepVars { h, c, context, alpha, cumulative }
    }

    fn check_example(&self, ex: &Example) -> Result<(), TtsError> {
        self.check_ids(&ex.phone_ids)?;
        if ex.mel.cols != self.config.n_mels {
            return Err(TtsError::MelShape { expected: self.config.n_mels, found: ex.mel.cols });
        }
        if ex.mel.rows == 0 {
            return Err(TtsError::EmptySequence);
        }
        check_prosody(&ex.prosody)
    }

    /// Records the full teacher-forced forward pass and the three losses for a
    /// batch. The decoder reads the vector named by `source` at every step;
    /// training uses [`ProsodySource::GroundTruth`].
    pub fn training_graph(&self, batch: &[Example], rng: &mut ChaCha8Rng, source: ProsodySource) -> Result<TrainingGraph, TtsError> {
        self.training_graph_with(batch, rng, source, true)
    }

    /// `Σ α[s, j] · (1 − exp(−(j/T − s/S)² / 2w²))` over valid steps and
    /// positions, divided by the number of valid steps and scaled by the
    /// configured weight: attention far from the diagonal costs up to 1 per step.
    fn attention_guide(&self, g: &mut Graph, alignments: &[Var], lengths: &[usize], steps: &[usize]) -> Var {
        let (nb, s_max) = (lengths.len(), alignments.len());
        let t = g.shape(alignments[0]).1;
        let w = self.config.guided_attention_width;
        let mut penalty = Tensor::zeros(nb, s_max * t);
        for b in 0..nb {
            let (len, n) = (lengths[b] as f64, steps[b] as f64);
            for s in 0..steps[b] {
                for j in 0..lengths[b] {
                    let d = (j as f64 + 0.5) / len - (s as f64 + 0.5) / n;
                    penalty.data[b * s_max * t + s * t + j] = 1.0 - (-d * d / (2.0 * w * w)).exp();
                }
            }
        }
        let valid: usize = steps.iter().sum();
        let all = g.concat_cols(alignments);
        let pv = g.constant(penalty);
        let weighted = g.mul(all, pv);
        let total = g.sum(weighted);
        g.scale(total, self.config.guided_attention_weight / valid as f64)
    }

    /// `barrier = false` lets the prosody loss reach the embeddings; only
    /// gradient checks use it, since finite differences see through the barrier.
    pub(crate) fn training_graph_with(
        &self,
        batch: &[Example],
        rng: &mut ChaCha8Rng,
        source: ProsodySource,
        barrier: bool,
    ) -> Result<TrainingGraph, TtsError> {
        if batch.is_empty() {
            return Err(TtsError::EmptySequence);
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let (nb, nm, r) = (batch.len(), self.config.n_mels, self.config.frames_per_step);
        let mut g = Graph::new();
        let ids: Vec<&[usize]> = batch.iter().map(|e| e.phone_ids.as_slice()).collect();
        let enc = self.encode_graph(&mut g, &ids);
        let predicted = self.prosody_graph_with(&mut g, &ids, barrier);
        let truth = Tensor::from_rows(&batch.iter().map(|e| e.prosody.to_vec()).collect::<Vec<_>>());
        let decoder_prosody = match source {
            ProsodySource::GroundTruth => g.constant(truth.clone()),
            ProsodySource::Predicted => predicted,
        };

        let dec_steps: Vec<usize> = batch.iter().map(|e| e.mel.rows.div_ceil(r)).collect();
        let s_max = *dec_steps.iter().max().expect("non-empty");
        // Targets padded to whole steps with the floor frame (0 in model units).
        let frame_at = |b: usize, f: usize| -> &[f64] {
            let m = &batch[b].mel;
            if f < m.rows {
                m.row_slice(f)
            } else {
                &[]
            }
        };

        let mut state = self.initial_step_vars(&mut g, nb, enc.steps);
        let mut frames = Vec::with_capacity(s_max);
        let mut stops = Vec::with_capacity(s_max);
        let mut alignments = Vec::with_capacity(s_max);
        let mut prev = g.constant(Tensor::zeros(nb, nm));
        for s in 0..s_max {
            let dropout = self.dropout_masks(&mut g, nb, rng);
            let noise = (self.config.attention_noise > 0.0).then(|| {
                let data = (0..nb * enc.steps).map(|_| self.config.attention_noise * rng.sample::<f64, _>(StandardNormal)).collect();
                g.constant(Tensor::new(nb, enc.steps, data))
            });
            let (f, stop, next) = self.step_graph(&mut g, &enc, prev, decoder_prosody, &state, &dropout, StepAttention::Soft { noise });
            frames.push(f);
            stops.push(stop);
            alignments.push(next.alpha);
            state = next;
            let mut tf = Tensor::zeros(nb, nm);
            for b in 0..nb {
                let row = frame_at(b, (s + 1) * r - 1);
                if !row.is_empty() {
                    tf.data[b * nm..(b + 1) * nm].copy_from_slice(row);
                }
            }
            let teacher = g.constant(tf);
            prev = if self.config.self_feed_prob > 0.0 {
                let mask: Vec<f64> = (0..nb).map(|_| f64::from(rng.gen::<f64>() < self.config.self_feed_prob)).collect();
                let last = g.slice_cols(f, (r - 1) * nm, nm);
                let own = g.stop_gradient(last);
                let mask = g.constant(Tensor::new(nb, 1, mask));
                g.mask_mix(own, teacher, mask)
            } else {
                teacher
            };
        }

        let all = g.concat_cols(&frames);
        let pred = g.reshape(all, nb * s_max, r * nm);
        let mut target = Tensor::zeros(nb * s_max, r * nm);
        let mut row_weights = vec![0.0; nb * s_max];
        for b in 0..nb {
            for s in 0..dec_steps[b] {
                row_weights[b * s_max + s] = 1.0;
                for k in 0..r {
                    let row = frame_at(b, s * r + k);
                    if !row.is_empty() {
                        let o = (b * s_max + s) * r * nm + k * nm;
                        target.data[o..o + nm].copy_from_slice(row);
                    }
                }
            }
        }
        let valid_rows: f64 = row_weights.iter().sum();
        let mel_l1 = g.l1_loss(pred, target, row_weights, valid_rows * (r * nm) as f64);

        let stop_logits = g.concat_cols(&stops);
        let mut targets = vec![0.0; nb * s_max];
        let mut weights = vec![1.0; nb * s_max];
        for b in 0..nb {
            for s in dec_steps[b] - 1..s_max {
                targets[b * s_max + s] = 1.0;
            }
            weights[b * s_max + dec_steps[b] - 1] = STOP_POSITIVE_WEIGHT;
        }
        let stop_bce = g.bce_with_logits(stop_logits, targets, weights, (nb * s_max) as f64);

        let prosody_mse = g.mse_loss(predicted, truth);
        let attention_guide = self.attention_guide(&mut g, &alignments, &enc.lengths, &dec_steps);
        let partial = g.add(mel_l1, stop_bce);
        let partial = g.add(partial, prosody_mse);
        let loss = g.add(partial, attention_guide);
        Ok(TrainingGraph {
            graph: g,
            loss,
            mel_l1,
            stop_bce,
            prosody_mse,
            attention_guide,
            predicted_prosody: predicted,
            decoder_prosody,
            decoder_prosody_source: source,
            alignments,
        })
    }

    /// `T × encoder_dim` outputs of the bidirectional phone encoder.
    pub fn phone_encoder_forward(&self, ids: &[usize]) -> Result<Tensor, TtsError> {
        self.encode(ids).map(|m| m.outputs)
    }

    pub fn encode(&self, ids: &[usize]) -> Result<EncoderMemory, TtsError> {
        self.check_ids(ids)?;
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, &[ids]);
        Ok(EncoderMemory { outputs: g.value(enc.outputs).clone(), keys: g.value(enc.keys).clone() })
    }

    /// Normalized prosody predicted from the phone embeddings; every value lies in (-1, 1).
    pub fn prosody_encoder_forward(&self, ids: &[usize]) -> Result<[f64; PROSODY_DIM], TtsError> {
        self.check_ids(ids)?;
        let mut g = Graph::new();
        let v = self.prosody_graph(&mut g, &[ids]);
        let mut out = [0.0; PROSODY_DIM];
        out.copy_from_slice(&g.value(v).data);
        Ok(out)
    }

    /// Encoder rows given directly (`(B·T) × encoder_dim`), keys projected on the tape.
    pub(crate) fn encoder_vars_from(&self, g: &mut Graph, outputs: Tensor, lengths: &[usize]) -> EncoderVars {
        let steps = outputs.rows / lengths.len();
        let outputs = g.constant(outputs);
        let wm = g.param(&self.params, self.layout.att_memory);
        let keys = g.matmul(outputs, wm);
        let row_batch = (0..lengths.len()).flat_map(|b| std::iter::repeat(b).take(steps)).collect();
        EncoderVars { outputs, keys, lengths: lengths.to_vec(), steps, row_batch }
    }

    fn memory_vars(&self, g: &mut Graph, memory: &EncoderMemory) -> EncoderVars {
        let steps = memory.len();
        EncoderVars {
            outputs: g.constant(memory.outputs.clone()),
            keys: g.constant(memory.keys.clone()),
            lengths: vec![steps],
            steps,
            row_batch: vec![0; steps],
        }
    }

    fn state_vars(&self, g: &mut Graph, state: &DecoderState) -> StepVars {
        let t = state.attention.alpha.len();
        StepVars {
            h: g.constant(Tensor::row(&state.h)),
            c: g.constant(Tensor::row(&state.c)),
            context: g.constant(Tensor::row(&state.context)),
            alpha: g.constant(Tensor::row(&state.attention.alpha)),
            cumulative: g.constant(Tensor::new(1, t, state.attention.cumulative.clone())),
        }
    }

    pub fn initial_decoder_state(&self, memory: &EncoderMemory) -> DecoderState {
        DecoderState {
            h: vec![0.0; self.config.decoder_hidden],
            c: vec![0.0; self.config.decoder_hidden],
            context: vec![0.0; self.config.encoder_dim()],
            attention: AttentionState::initial(memory.len()),
        }
    }

    /// Attends over `memory` from decoder output `h`. Returns the context and
    /// the advanced attention state.
    pub fn attention_step(
        &self,
        memory: &EncoderMemory,
        h: &[f64],
        state: &AttentionState,
        mode: AttentionMode,
    ) -> Result<(Vec<f64>, AttentionState), TtsError> {
        if h.len() != self.config.decoder_hidden {
            return Err(TtsError::Config(format!("query has {} values, expected {}", h.len(), self.config.decoder_hidden)));
        }
        if state.alpha.len() != memory.len() || state.cumulative.len() != memory.len() {
            return Err(TtsError::Config("attention state does not match the encoder length".into()));
        }
        let mut g = Graph::new();
        let enc = self.memory_vars(&mut g, memory);
        let hv = g.constant(Tensor::row(h));
        let alpha_prev = g.constant(Tensor::row(&state.alpha));
        let cum = g.constant(Tensor::row(&state.cumulative));
        let p = self.attention_graph(&mut g, &enc, hv, alpha_prev, cum, None);
        let alpha = match mode {
            AttentionMode::Soft => {
                let a = g.monotonic_attention(p, alpha_prev, &enc.lengths);
                g.value(a).data.clone()
            }
            AttentionMode::Hard => {
                let mut a = vec![0.0; memory.len()];
                a[hard_focus(&g.value(p).data, argmax(&state.alpha), memory.len())] = 1.0;
                a
            }
        };
        let av = g.constant(Tensor::row(&alpha));
        let ctx = g.attend(av, enc.outputs);
        let cumulative = state.cumulative.iter().zip(&alpha).map(|(c, a)| c + a).collect();
        Ok((g.value(ctx).data.clone(), AttentionState { alpha, cumulative }))
    }

    /// One autoregressive step on a single utterance. `prev_frame` is in
    /// model units; `dropout_rng` draws the pre-net masks (none when `None`).
    pub fn decoder_step(
        &self,
        memory: &EncoderMemory,
        prev_frame: &[f64],
        prosody: &[f64],
        state: &DecoderState,
        mode: AttentionMode,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(DecoderStepOutput, DecoderState), TtsError> {
        check_prosody(prosody)?;
        if prev_frame.len() != self.config.n_mels {
            return Err(TtsError::MelShape { expected: self.config.n_mels, found: prev_frame.len() });
        }
        if state.attention.alpha.len() != memory.len() {
            return Err(TtsError::Config("decoder state does not match the encoder length".into()));
        }
        let mut g = Graph::new();
        let enc = self.memory_vars(&mut g, memory);
        let vars = self.state_vars(&mut g, state);
        let prev = g.constant(Tensor::row(prev_frame));
        let pv = g.constant(Tensor::row(prosody));
        let dropout = match dropout_rng {
            Some(rng) => self.dropout_masks(&mut g, 1, rng),
            None => vec![None; self.config.prenet_dims.len()],
        };
        let previous = [argmax(&state.attention.alpha)];
        let attention = match mode {
            AttentionMode::Soft => StepAttention::Soft { noise: None },
            AttentionMode::Hard => StepAttention::Hard { previous: &previous },
        };
        let (frames, stop, next) = self.step_graph(&mut g, &enc, prev, pv, &vars, &dropout, attention);
        if g.first_non_finite().is_some() {
            return Err(TtsError::NonFinite);
        }
        let nm = self.config.n_mels;
        let out = DecoderStepOutput {
            frames: g.value(frames).data.chunks(nm).map(<[f64]>::to_vec).collect(),
            stop_logit: g.value(stop).data[0],
        };
        let new_state = DecoderState {
            h: g.value(next.h).data.clone(),
            c: g.value(next.c).data.clone(),
            context: g.value(next.context).data.clone(),
            attention: AttentionState { alpha: g.value(next.alpha).data.clone(), cumulative: g.value(next.cumulative).data.clone() },
        };
        Ok((out, new_state))
    }

    /// Fixed pre-net dropout stream used at inference, so synthesis is a pure
    /// function of its inputs.
    pub fn inference_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x1f3e_5c7a_9b2d_4e60)
    }

    /// Autoregressive synthesis with the prosody bias applied per `options.mode`.
    pub fn synthesize(&self, ids: &[usize], bias: &[f64], options: &SynthesisOptions) -> Result<Synthesis, TtsError> {
        check_prosody(bias)?;
        let memory = self.encode(ids)?;
        let predicted = self.prosody_encoder_forward(ids)?;
        let applied: Vec<f64> = match options.mode {
            BiasMode::Absolute => bias.to_vec(),
            BiasMode::Additive => predicted.iter().zip(bias).map(|(p, b)| (p + b).clamp(-1.0, 1.0)).collect(),
        };
        let mut rng = self.inference_rng();
        let mut state = self.initial_decoder_state(&memory);
        let mut prev = vec![0.0; self.config.n_mels];
        let mut frames: Vec<Vec<f64>> = Vec::new();
        let mut alignments = Vec::new();
        let mut truncated = true;
        while frames.len() < options.max_frames {
            let (out, next) = self.decoder_step(&memory, &prev, &applied, &state, options.attention, Some(&mut rng))?;
            prev = out.frames.last().expect("at least one frame per step").clone();
            frames.extend(out.frames);
            alignments.push(next.attention.alpha.clone());
            state = next;
            if out.stop_logit > 0.0 {
                truncated = false;
                break;
            }
        }
        frames.truncate(options.max_frames.max(1));
        let frames = frames.into_iter().map(|f| f.into_iter().map(|v| self.config.from_model_units(v)).collect()).collect();
        let attention_path = alignments.iter().map(|a| argmax(a)).collect();
        let mut applied_arr = [0.0; PROSODY_DIM];
        applied_arr.copy_from_slice(&applied);
        Ok(Synthesis {
            mel: MelSpectrogram { frames, config: self.config.analysis.clone() },
            predicted: ProsodyVector::from_array(predicted, Space::Normalized),
            applied: ProsodyVector::from_array(applied_arr, Space::Normalized),
            truncated,
            alignments,
            attention_path,
            frames_per_step: self.config.frames_per_step,
        })
    }

    /// Replaces every parameter by name from `values`, checking shapes.
    pub fn load_params(&mut self, values: Vec<(String, Tensor)>) -> Result<(), TtsError> {
        if values.len() != self.params.len() {
            return Err(TtsError::ConfigMismatch(format!("{} tensors for {} parameters", values.len(), self.params.len())));
        }
        for (name, t) in values {
            let id = self.params.find(&name).ok_or_else(|| TtsError::ConfigMismatch(format!("unknown parameter {name}")))?;
            let cur = self.params.get_mut(id);
            if cur.shape() != t.shape() {
                return Err(TtsError::ConfigMismatch(format!("{name}: shape {:?}, expected {:?}", t.shape(), cur.shape())));
            }
            *cur = t;
        }
        Ok(())
    }
}

/// Weight of the positive (final-step) stop target.
pub const STOP_POSITIVE_WEIGHT: f64 = 5.0;
