//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs. [`Graph::backward`] walks the tape once in reverse, accumulating
//! adjoints. Besides elementwise and matrix primitives the tape has fused
//! nodes for the attention recursion, location convolution and the losses,
//! each with a hand-written adjoint.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::TtsError;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Const,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    StopGradient,
    MulCol(Var, Var),
    Monotonic { p: Var, prev: Var, lengths: Vec<usize>, effective: Vec<f64> },
    LocConv { prev: Var, cum: Var, w: Var, width: usize },
    Attend { alpha: Var, enc: Var },
    Sum(Var),
    L1 { pred: Var, target: Tensor, weights: Vec<f64>, norm: f64 },
    Bce { logits: Var, targets: Vec<f64>, weights: Vec<f64>, norm: f64 },
    Mse { pred: Var, target: Tensor },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// One forward computation. Parameters enter through [`Graph::param`], which
/// shares each parameter tensor with the store and records it once.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    first_non_finite: Option<usize>,
}

/// Adjoints of one backward pass, indexed by tape position.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter, or `None` when no path reached it.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.of(*v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), first_non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Tape index of the first node whose value was not finite.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value: Arc::new(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (gradients are reported for it).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.shared(id), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul {:?} x {:?}", ta.shape(), tb.shape());
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(&ta.data, ta.shape(), false, &tb.data, tb.shape(), false, &mut out.data, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1 × cols` (or `1 × 1`) bias to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        assert!(tb.rows == 1 && (tb.cols == tx.cols || tb.cols == 1), "bias {:?} for {:?}", tb.shape(), tx.shape());
        let mut out = tx.clone();
        if tb.cols == 1 {
            out.data.iter_mut().for_each(|v| *v += tb.data[0]);
        } else {
            for r in 0..out.rows {
                out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&tb.data).for_each(|(v, b)| *v += b);
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.rows, ta.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|x| f(*x)).collect());
        self.push(out, op)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Passes the value through and blocks every gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::StopGradient)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                data.extend_from_slice(t.row_slice(r));
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice {start}+{len} of {} columns", t.cols);
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        self.push(Tensor::new(t.rows, len, data), Op::Slice(a, start))
    }

    /// Row `i` of the output is row `idx[i]` of `a` (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        self.push(Tensor::new(idx.len(), t.cols, data), Op::Gather(a, idx.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape {:?} to {rows}x{cols}", t.shape());
        let out = Tensor::new(rows, cols, t.data.clone());
        self.push(out, Op::Reshape(a))
    }

    /// Scales row `r` of `x` by `m[r]` (`m` is `rows × 1`).
    pub fn mul_col(&mut self, x: Var, m: Var) -> Var {
        let (tx, tm) = (self.value(x), self.value(m));
        assert_eq!((tm.rows, tm.cols), (tx.rows, 1), "mul_col mask shape");
        let mut out = tx.clone();
        for r in 0..out.rows {
            let k = tm.data[r];
            out.data[r * out.cols..(r + 1) * out.cols].iter_mut().for_each(|v| *v *= k);
        }
        self.push(out, Op::MulCol(x, m))
    }

    /// `m ⊙ new + (1 - m) ⊙ old` with a per-row 0/1 mask.
    pub fn mask_mix(&mut self, new: Var, old: Var, mask: Var) -> Var {
        let d = self.sub(new, old);
        let md = self.mul_col(d, mask);
        self.add(old, md)
    }

    /// Stepwise monotonic attention from stay probabilities `p` (`B × T`) and
    /// the previous weights `prev`: `α_j = a_j p_j + a_{j-1} (1 - p_{j-1})`,
    /// so focus either stays or moves one position forward per step. The
    /// probability at the last valid position of each row is forced to 1 so
    /// the weights keep summing to 1; positions past `lengths[b]` get 0.
    pub fn monotonic_attention(&mut self, p: Var, prev: Var, lengths: &[usize]) -> Var {
        let (tp, ta) = (self.value(p), self.value(prev));
        assert_eq!(tp.shape(), ta.shape(), "monotonic attention shapes");
        assert_eq!(lengths.len(), tp.rows, "one length per row");
        let (b, t) = tp.shape();
        let mut effective = tp.data.clone();
        let mut alpha = vec![0.0; b * t];
        for r in 0..b {
            let len = lengths[r].clamp(1, t);
            let row = r * t;
            effective[row + len - 1] = 1.0;
            effective[row + len..row + t].iter_mut().for_each(|v| *v = 0.0);
            for j in 0..len {
                let moved = if j > 0 { ta.data[row + j - 1] * (1.0 - effective[row + j - 1]) } else { 0.0 };
                alpha[row + j] = ta.data[row + j] * effective[row + j] + moved;
            }
        }
        let op = Op::Monotonic { p, prev, lengths: lengths.to_vec(), effective };
        self.push(Tensor::new(b, t, alpha), op)
    }

    /// Location features: `C` filters of odd `width` over the previous and
    /// cumulative weights (`B × T` each). `w` is `C × 2·width`; the output is
    /// `(B·T) × C`, zero padded at the sequence edges.
    pub fn location_conv(&mut self, prev: Var, cum: Var, w: Var) -> Var {
        let (tp, tc, tw) = (self.value(prev), self.value(cum), self.value(w));
        assert_eq!(tp.shape(), tc.shape());
        let width = tw.cols / 2;
        let (b, t) = tp.shape();
        let half = width as isize / 2;
        let filters = tw.rows;
        let mut out = vec![0.0; b * t * filters];
        for r in 0..b {
            for j in 0..t {
                let o = &mut out[(r * t + j) * filters..(r * t + j + 1) * filters];
                for k in 0..width {
                    let src = j as isize + k as isize - half;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let (pv, cv) = (tp.data[r * t + src as usize], tc.data[r * t + src as usize]);
                    for (c, oc) in o.iter_mut().enumerate() {
                        *oc += tw.data[c * 2 * width + k] * pv + tw.data[c * 2 * width + width + k] * cv;
                    }
                }
            }
        }
        self.push(Tensor::new(b * t, filters, out), Op::LocConv { prev, cum, w, width })
    }

    /// `ctx[b] = Σ_j α[b, j] enc[b·T + j]` for `α` (`B × T`) and `enc` (`(B·T) × D`).
    pub fn attend(&mut self, alpha: Var, enc: Var) -> Var {
        let (ta, te) = (self.value(alpha), self.value(enc));
        let (b, t) = ta.shape();
        assert_eq!(te.rows, b * t, "encoder rows must be B·T");
        let d = te.cols;
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            for j in 0..t {
                let w = ta.data[r * t + j];
                if w != 0.0 {
                    let src = te.row_slice(r * t + j);
                    out[r * d..(r + 1) * d].iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
                }
            }
        }
        self.push(Tensor::new(b, d, out), Op::Attend { alpha, enc })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `Σ_r w_r Σ_c |pred - target| / norm`.
    pub fn l1_loss(&mut self, pred: Var, target: Tensor, row_weights: Vec<f64>, norm: f64) -> Var {
        let tp = self.value(pred);
        assert_eq!(tp.shape(), target.shape(), "l1 target shape");
        assert_eq!(row_weights.len(), tp.rows);
        let mut s = 0.0;
        for r in 0..tp.rows {
            if row_weights[r] != 0.0 {
                let row: f64 = tp.row_slice(r).iter().zip(target.row_slice(r)).map(|(a, b)| (a - b).abs()).sum();
                s += row_weights[r] * row;
            }
        }
        self.push(Tensor::scalar(s / norm), Op::L1 { pred, target, weights: row_weights, norm })
    }

    /// Weighted binary cross-entropy on logits, `Σ w_i ℓ_i / norm`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>, weights: Vec<f64>, norm: f64) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.len(), targets.len());
        assert_eq!(tl.len(), weights.len());
        let s: f64 = tl
            .data
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((x, y), w)| w * (softplus(*x) - y * x))
            .sum();
        self.push(Tensor::scalar(s / norm), Op::Bce { logits, targets, weights, norm })
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Tensor) -> Var {
        let tp = self.value(pred);
        assert_eq!(tp.shape(), target.shape(), "mse target shape");
        let s: f64 = tp.data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tp.len() as f64;
        self.push(Tensor::scalar(s), Op::Mse { pred, target })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TtsError> {
        let node = self.nodes.get(loss.0).ok_or_else(|| TtsError::Graph(format!("node {} is not on this tape", loss.0)))?;
        if node.value.shape() != (1, 1) {
            return Err(TtsError::Graph(format!("backward needs a scalar, got {:?}", node.value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let len_of = |v: Var| self.nodes[v.0].value.len();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = len_of(v);
                grads[v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Input | Op::Const | Op::Param | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let gs = (ta.rows, tb.cols);
                gemm(g, gs, false, &tb.data, tb.shape(), true, acc!(*a), 1.0);
                gemm(&ta.data, ta.shape(), true, g, gs, false, acc!(*b), 1.0);
            }
            Op::AddBias(x, b) => {
                acc!(*x).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                let cols = node.value.cols;
                let gb = acc!(*b);
                if gb.len() == 1 {
                    gb[0] += g.iter().sum::<f64>();
                } else {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Add(a, b) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                acc!(*b).iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::Sub(a, b) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                acc!(*b).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a.0].value.data.clone();
                let vb = &self.nodes[b.0].value.data;
                acc!(a).iter_mut().zip(g).zip(vb).for_each(|((d, s), y)| *d += s * y);
                acc!(b).iter_mut().zip(g).zip(&va).for_each(|((d, s), x)| *d += s * x);
            }
            Op::Scale(a, k) => acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += k * s),
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                acc!(*a).iter_mut().zip(g).zip(y).for_each(|((d, s), y)| *d += s * y * (1.0 - y));
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                acc!(*a).iter_mut().zip(g).zip(y).for_each(|((d, s), y)| *d += s * (1.0 - y * y));
            }
            Op::Relu(a) => {
                let y = &node.value.data;
                acc!(*a).iter_mut().zip(g).zip(y).for_each(|((d, s), y)| {
                    if *y > 0.0 {
                        *d += s
                    }
                });
            }
            Op::Concat(parts) => {
                let (rows, cols) = node.value.shape();
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.cols;
                    let gp = acc!(*p);
                    for r in 0..rows {
                        gp[r * pc..(r + 1) * pc].iter_mut().zip(&g[r * cols + offset..r * cols + offset + pc]).for_each(|(d, s)| *d += s);
                    }
                    offset += pc;
                }
            }
            Op::Slice(a, start) => {
                let (rows, len) = node.value.shape();
                let ac = self.nodes[a.0].value.cols;
                let ga = acc!(*a);
                for r in 0..rows {
                    ga[r * ac + start..r * ac + start + len].iter_mut().zip(&g[r * len..(r + 1) * len]).for_each(|(d, s)| *d += s);
                }
            }
            Op::Gather(a, idx) => {
                let cols = node.value.cols;
                let ga = acc!(*a);
                for (o, &src) in idx.iter().enumerate() {
                    ga[src * cols..(src + 1) * cols].iter_mut().zip(&g[o * cols..(o + 1) * cols]).for_each(|(d, s)| *d += s);
                }
            }
            Op::Reshape(a) => acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s),
            Op::MulCol(x, m) => {
                let (x, m) = (*x, *m);
                let cols = node.value.cols;
                let vm = self.nodes[m.0].value.data.clone();
                let vx = &self.nodes[x.0].value.data;
                let mut gm = vec![0.0; vm.len()];
                for r in 0..vm.len() {
                    gm[r] = g[r * cols..(r + 1) * cols].iter().zip(&vx[r * cols..(r + 1) * cols]).map(|(s, x)| s * x).sum();
                }
                let gx = acc!(x);
                for r in 0..vm.len() {
                    gx[r * cols..(r + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, s)| *d += s * vm[r]);
                }
                acc!(m).iter_mut().zip(&gm).for_each(|(d, s)| *d += s);
            }
            Op::Monotonic { p, prev, lengths, effective } => {
                let (b, t) = node.value.shape();
                let a = &self.nodes[prev.0].value.data;
                let mut gp = vec![0.0; b * t];
                let mut ga = vec![0.0; b * t];
                for r in 0..b {
                    let len = lengths[r].clamp(1, t);
                    let row = r * t;
                    for j in 0..len {
                        let e = effective[row + j];
                        let g_next = if j + 1 < len { g[row + j + 1] } else { 0.0 };
                        ga[row + j] = g[row + j] * e + g_next * (1.0 - e);
                        if j + 1 < len {
                            gp[row + j] = (g[row + j] - g_next) * a[row + j];
                        }
                    }
                }
                acc!(*p).iter_mut().zip(&gp).for_each(|(d, s)| *d += s);
                acc!(*prev).iter_mut().zip(&ga).for_each(|(d, s)| *d += s);
            }
            Op::LocConv { prev, cum, w, width } => {
                let (tp, tc, tw) = (&self.nodes[prev.0].value, &self.nodes[cum.0].value, &self.nodes[w.0].value);
                let (b, t) = tp.shape();
                let filters = tw.rows;
                let width = *width;
                let half = width as isize / 2;
                let mut gpv = vec![0.0; b * t];
                let mut gcv = vec![0.0; b * t];
                let mut gw = vec![0.0; tw.len()];
                for r in 0..b {
                    for j in 0..t {
                        let go = &g[(r * t + j) * filters..(r * t + j + 1) * filters];
                        for k in 0..width {
                            let src = j as isize + k as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let s = r * t + src as usize;
                            let (pv, cv) = (tp.data[s], tc.data[s]);
                            for (c, gc) in go.iter().enumerate() {
                                let (wp, wc) = (c * 2 * width + k, c * 2 * width + width + k);
                                gpv[s] += gc * tw.data[wp];
                                gcv[s] += gc * tw.data[wc];
                                gw[wp] += gc * pv;
                                gw[wc] += gc * cv;
                            }
                        }
                    }
                }
                acc!(*prev).iter_mut().zip(&gpv).for_each(|(d, s)| *d += s);
                acc!(*cum).iter_mut().zip(&gcv).for_each(|(d, s)| *d += s);
                acc!(*w).iter_mut().zip(&gw).for_each(|(d, s)| *d += s);
            }
            Op::Attend { alpha, enc } => {
                let (ta, te) = (&self.nodes[alpha.0].value, &self.nodes[enc.0].value);
                let (b, t) = ta.shape();
                let d = te.cols;
                let mut galpha = vec![0.0; b * t];
                let mut genc = vec![0.0; te.len()];
                for r in 0..b {
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..t {
                        let e = te.row_slice(r * t + j);
                        galpha[r * t + j] = gr.iter().zip(e).map(|(x, y)| x * y).sum();
                        let w = ta.data[r * t + j];
                        genc[(r * t + j) * d..(r * t + j + 1) * d].iter_mut().zip(gr).for_each(|(o, s)| *o = w * s);
                    }
                }
                acc!(*alpha).iter_mut().zip(&galpha).for_each(|(d, s)| *d += s);
                acc!(*enc).iter_mut().zip(&genc).for_each(|(d, s)| *d += s);
            }
            Op::Sum(a) => acc!(*a).iter_mut().for_each(|d| *d += g[0]),
            Op::L1 { pred, target, weights, norm } => {
                let tp = &self.nodes[pred.0].value;
                let cols = tp.cols;
                let k = g[0] / norm;
                let gp = acc!(*pred);
                for r in 0..tp.rows {
                    if weights[r] == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        let diff = tp.data[r * cols + c] - target.data[r * cols + c];
                        gp[r * cols + c] += k * weights[r] * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Bce { logits, targets, weights, norm } => {
                let tl = self.nodes[logits.0].value.data.clone();
                let k = g[0] / norm;
                acc!(*logits)
                    .iter_mut()
                    .zip(&tl)
                    .zip(targets.iter().zip(weights))
                    .for_each(|((d, x), (y, w))| *d += k * w * (sigmoid(*x) - y));
            }
            Op::Mse { pred, target } => {
                let tp = self.nodes[pred.0].value.data.clone();
                let k = 2.0 * g[0] / tp.len() as f64;
                acc!(*pred).iter_mut().zip(&tp).zip(&target.data).for_each(|((d, p), t)| *d += k * (p - t));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let p = g.input(Tensor::row(&[1.0, -2.0, 3.5]));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_two_p() {
        let mut g = Graph::new();
        let p = g.input(Tensor::row(&[1.0, 2.0]));
        let sq = g.mul(p, p);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut g = Graph::new();
        let p = g.input(Tensor::row(&[1.0, 2.0]));
        let q = g.stop_gradient(p);
        let sq = g.mul(q, q);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert!(grads.of(p).is_none());
    }

    #[test]
    fn backward_needs_a_scalar_on_this_tape() {
        let mut g = Graph::new();
        let p = g.input(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(TtsError::Graph(_))));
        assert!(matches!(g.backward(Var(99)), Err(TtsError::Graph(_))));
    }

    #[test]
    fn monotonic_weights_sum_to_one() {
        let mut g = Graph::new();
        let p = g.input(Tensor::new(2, 4, vec![0.3, 0.9, 0.1, 0.5, 0.2, 0.4, 0.7, 0.7]));
        let prev = g.constant(Tensor::new(2, 4, vec![0.5, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
        let a = g.monotonic_attention(p, prev, &[4, 2]);
        let v = g.value(a);
        for r in 0..2 {
            let s: f64 = v.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(&v.row_slice(1)[2..], &[0.0, 0.0]);
    }

    #[test]
    fn single_position_gets_all_weight() {
        let mut g = Graph::new();
        let p = g.input(Tensor::new(1, 1, vec![0.1]));
        let prev = g.constant(Tensor::new(1, 1, vec![1.0]));
        let a = g.monotonic_attention(p, prev, &[1]);
        assert_eq!(g.value(a).data, vec![1.0]);
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let mut g = Graph::new();
        let p = g.input(Tensor::row(&[1.0]));
        assert!(g.first_non_finite().is_none());
        let big = g.scale(p, f64::INFINITY);
        assert_eq!(g.first_non_finite(), Some(big.index()));
    }
}
