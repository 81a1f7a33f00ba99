use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_glorot(format!("{name}.w"), input, output, rng);
        let b = store.add_zeros(format!("{name}.b"), 1, output);
        Self { w, b, input, output }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w);
        g.add_bias(xw, b)
    }
}

/// LSTM cell with gates `[i, f, g, o]` from one matrix over `[x, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    /// Forget-gate bias starts at 1.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_glorot(format!("{name}.w"), input + hidden, 4 * hidden, rng);
        let mut bias = Tensor::zeros(1, 4 * hidden);
        bias.data[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.b"), bias);
        Self { w, b, input, hidden }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(batch, self.hidden));
        let c = g.constant(Tensor::zeros(batch, self.hidden));
        LstmState { h, c }
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, state: LstmState) -> LstmState {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xh = g.concat_cols(&[x, state.h]);
        let pre = g.matmul(xh, w);
        let gates = g.add_bias(pre, b);
        let n = self.hidden;
        let i = g.slice_cols(gates, 0, n);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, n, n);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * n, n);
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * n, n);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, cand);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }
}

/// Per-step `B × 1` validity masks for sequences of the given lengths, or
/// `None` at steps where every row is valid.
pub fn step_masks(g: &mut Graph, lengths: &[usize], steps: usize) -> Vec<Option<Var>> {
    (0..steps)
        .map(|t| {
            if lengths.iter().all(|&l| t < l) {
                None
            } else {
                let m = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
                Some(g.constant(Tensor::new(lengths.len(), 1, m)))
            }
        })
        .collect()
}

/// Runs `cell` over `xs` (one `B × input` var per step). Where a mask row is 0
/// the state is carried through unchanged, so a reverse pass over padded
/// sequences starts at each row's own last element. Returns the hidden state
/// after every step, in input order, and the final state.
pub fn run_lstm(
    g: &mut Graph,
    store: &ParamStore,
    cell: &LstmCell,
    xs: &[Var],
    masks: &[Option<Var>],
    reverse: bool,
) -> (Vec<Var>, LstmState) {
    let batch = g.shape(xs[0]).0;
    let mut state = cell.zero_state(g, batch);
    let mut outputs = vec![state.h; xs.len()];
    let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
    for t in order {
        let next = cell.step(g, store, xs[t], state);
        state = match masks[t] {
            None => next,
            Some(m) => LstmState { h: g.mask_mix(next.h, state.h, m), c: g.mask_mix(next.c, state.c, m) },
        };
        outputs[t] = state.h;
    }
    (outputs, state)
}
