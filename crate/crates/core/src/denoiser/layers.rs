//! Tape-level building blocks: linear maps, layer norm, multi-head
//! attention, feed-forward sublayers and a bidirectional GRU.

use ndarray::Array2;

use super::params::{Init, ParamId, ParamSet, Session};
use crate::autodiff::Var;

const LN_EPS: f64 = 1e-5;

/// Sinusoidal embedding of a position or timestep: interleaved
/// `(sin(t / 10000^(2i/h)), cos(t / 10000^(2i/h)))` pairs, shape `1 x h`.
pub fn sinusoidal_embedding(t: usize, h: usize) -> Array2<f64> {
    assert!(h >= 2 && h % 2 == 0, "embedding width must be even");
    let mut out = Array2::zeros((1, h));
    for i in 0..h / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / h as f64);
        let angle = t as f64 * freq;
        out[[0, 2 * i]] = angle.sin();
        out[[0, 2 * i + 1]] = angle.cos();
    }
    out
}

/// Constant position table for a length-`m` sentence.
pub fn position_table(m: usize, h: usize) -> Array2<f64> {
    let mut out = Array2::zeros((m, h));
    for pos in 0..m {
        out.row_mut(pos).assign(&sinusoidal_embedding(pos, h).row(0));
    }
    out
}

/// Attention heads for a hidden width: 8 when divisible, otherwise the
/// largest divisor not exceeding 8.
pub fn head_count(h: usize) -> usize {
    (1..=8.min(h)).rev().find(|n| h % n == 0).unwrap_or(1)
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = params.register(format!("{name}.w"), init.xavier(in_dim, out_dim), true);
        let b = bias.then(|| params.register(format!("{name}.b"), Array2::zeros((1, out_dim)), false));
        Self { w, b }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.w);
        let y = s.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.tape.add_row_broadcast(y, b)
            }
            None => y,
        }
    }
}

pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, h: usize) -> Self {
        let gamma = params.register(format!("{name}.gamma"), Array2::ones((1, h)), false);
        let beta = params.register(format!("{name}.beta"), Array2::zeros((1, h)), false);
        Self { gamma, beta }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        s.tape.layer_norm_rows(x, gamma, beta, LN_EPS)
    }
}

pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, h: usize, inner: usize) -> Self {
        Self {
            lin1: Linear::new(params, init, &format!("{name}.lin1"), h, inner, true),
            lin2: Linear::new(params, init, &format!("{name}.lin2"), inner, h, true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let y = self.lin1.forward(s, x);
        let y = s.tape.gelu(y);
        self.lin2.forward(s, y)
    }
}

pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, h: usize) -> Self {
        let heads = head_count(h);
        Self {
            wq: Linear::new(params, init, &format!("{name}.wq"), h, h, false),
            wk: Linear::new(params, init, &format!("{name}.wk"), h, h, false),
            wv: Linear::new(params, init, &format!("{name}.wv"), h, h, false),
            wo: Linear::new(params, init, &format!("{name}.wo"), h, h, false),
            heads,
            head_dim: h / heads,
        }
    }

    /// Scaled dot-product attention; `query` attends over `keyval`.
    pub fn forward(&self, s: &mut Session, query: Var, keyval: Var) -> Var {
        let q = self.wq.forward(s, query);
        let k = self.wk.forward(s, keyval);
        let v = self.wv.forward(s, keyval);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut per_head = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let lo = head * self.head_dim;
            let hi = lo + self.head_dim;
            let qh = s.tape.slice_cols(q, lo, hi);
            let kh = s.tape.slice_cols(k, lo, hi);
            let vh = s.tape.slice_cols(v, lo, hi);
            let kt = s.tape.transpose(kh);
            let scores = s.tape.matmul(qh, kt);
            let scores = s.tape.scale(scores, scale);
            let attn = s.tape.softmax_rows(scores);
            per_head.push(s.tape.matmul(attn, vh));
        }
        let merged = s.tape.concat_cols(&per_head);
        self.wo.forward(s, merged)
    }
}

/// Post-norm attention block: attention and feed-forward sublayers, each
/// with a residual connection and layer normalization.
pub struct AttentionBlock {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

impl AttentionBlock {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, h: usize, ff_inner: usize) -> Self {
        Self {
            attn: MultiHeadAttention::new(params, init, &format!("{name}.attn"), h),
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), h),
            ff: FeedForward::new(params, init, &format!("{name}.ff"), h, ff_inner),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), h),
        }
    }

    pub fn forward(&self, s: &mut Session, query: Var, keyval: Var) -> Var {
        let a = self.attn.forward(s, query, keyval);
        let x = s.tape.add(query, a);
        let x = self.ln1.forward(s, x);
        let f = self.ff.forward(s, x);
        let y = s.tape.add(x, f);
        self.ln2.forward(s, y)
    }
}

pub struct GruCell {
    wx: Linear, // input -> 3 * state (reset | update | candidate)
    wh: Linear, // state -> 3 * state, no bias
    state: usize,
}

impl GruCell {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, input: usize, state: usize) -> Self {
        Self {
            wx: Linear::new(params, init, &format!("{name}.wx"), input, 3 * state, true),
            wh: Linear::new(params, init, &format!("{name}.wh"), state, 3 * state, false),
            state,
        }
    }

    /// Run over the row sequence of `x` (n x input) in the given order;
    /// returns the state rows in input order.
    fn run(&self, s: &mut Session, x: Var, reverse: bool) -> Vec<Var> {
        let n = s.tape.value(x).nrows();
        let xs_all = self.wx.forward(s, x); // n x 3*state
        let d = self.state;
        let mut h = s.tape.constant(Array2::zeros((1, d)));
        let mut states = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for i in order {
            let xt = s.tape.slice_rows(xs_all, i, i + 1);
            let ht = self.wh.forward(s, h);
            let xr = s.tape.slice_cols(xt, 0, d);
            let xz = s.tape.slice_cols(xt, d, 2 * d);
            let xn = s.tape.slice_cols(xt, 2 * d, 3 * d);
            let hr = s.tape.slice_cols(ht, 0, d);
            let hz = s.tape.slice_cols(ht, d, 2 * d);
            let hn = s.tape.slice_cols(ht, 2 * d, 3 * d);
            let r_pre = s.tape.add(xr, hr);
            let r = s.tape.sigmoid(r_pre);
            let z_pre = s.tape.add(xz, hz);
            let z = s.tape.sigmoid(z_pre);
            let gated = s.tape.mul(r, hn);
            let n_pre = s.tape.add(xn, gated);
            let cand = s.tape.tanh(n_pre);
            let keep = s.tape.mul(z, h);
            let zc = s.tape.one_minus(z);
            let new = s.tape.mul(zc, cand);
            h = s.tape.add(keep, new);
            states[i] = h;
        }
        states
    }
}

/// Bidirectional GRU producing `h/2` state per direction, concatenated.
pub struct BiGru {
    fwd: GruCell,
    bwd: GruCell,
}

impl BiGru {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, h: usize) -> Self {
        assert!(h % 2 == 0, "bidirectional state needs even hidden width");
        Self {
            fwd: GruCell::new(params, init, &format!("{name}.fwd"), h, h / 2),
            bwd: GruCell::new(params, init, &format!("{name}.bwd"), h, h / 2),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let fwd = self.fwd.run(s, x, false);
        let bwd = self.bwd.run(s, x, true);
        let rows: Vec<Var> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| s.tape.concat_cols(&[f, b]))
            .collect();
        s.tape.concat_rows(&rows)
    }
}
