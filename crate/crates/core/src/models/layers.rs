//! Parameter-holding building blocks shared by the architectures.

use numcore::{Graph, NumError, ParamId, ParamStore, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;

pub(crate) type GResult<T> = std::result::Result<T, NumError>;

/// `x W + b`
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> GResult<Self> {
        Ok(Linear {
            w: store.add_glorot(format!("{name}.w"), input, output, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[1, output])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> GResult<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> GResult<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, dim], 1.0))?,
            bias: store.add_zeros(format!("{name}.bias"), &[1, dim])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> GResult<Var> {
        let n = g.layer_norm_rows(x, 1e-5);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }
}

/// One unidirectional LSTM layer with gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub(crate) struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

pub(crate) struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> GResult<Self> {
        let mut bias = vec![0.0; 4 * hidden];
        // forget gate starts open
        bias[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        Ok(LstmLayer {
            w_ih: store.add_glorot(format!("{name}.w_ih"), input, 4 * hidden, rng)?,
            w_hh: store.add_glorot(format!("{name}.w_hh"), hidden, 4 * hidden, rng)?,
            b: store.add(format!("{name}.b"), Tensor::row(bias))?,
            hidden,
        })
    }

    /// Input projection for a whole sequence at once: `x W_ih + b`.
    pub fn project_inputs(&self, g: &mut Graph, x: Var) -> GResult<Var> {
        let w = g.param(self.w_ih);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    /// One step given the already projected input row.
    pub fn step(&self, g: &mut Graph, projected: Var, prev: &LstmState) -> GResult<LstmState> {
        let w_hh = g.param(self.w_hh);
        let rec = g.matmul(prev.h, w_hh)?;
        let gates = g.add(projected, rec)?;
        let h = self.hidden;
        let i = g.slice_cols(gates, 0, h)?;
        let f = g.slice_cols(gates, h, h)?;
        let c_hat = g.slice_cols(gates, 2 * h, h)?;
        let o = g.slice_cols(gates, 3 * h, h)?;
        let (i, f, c_hat, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(c_hat), g.sigmoid(o));
        let keep = g.mul(f, prev.c)?;
        let write = g.mul(i, c_hat)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        LstmState { h: g.constant(Tensor::zeros(&[1, self.hidden])), c: g.constant(Tensor::zeros(&[1, self.hidden])) }
    }

    /// Runs over all rows of `x`, forwards or backwards. Returns the hidden
    /// rows in input order.
    pub fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> GResult<Vec<Var>> {
        let n = g.dims(x).0;
        let projected = self.project_inputs(g, x)?;
        let mut state = self.zero_state(g);
        let mut out = vec![state.h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let p = g.row(projected, t)?;
            state = self.step(g, p, &state)?;
            out[t] = state.h;
        }
        Ok(out)
    }
}

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections. Head `h` uses columns `h*dh..(h+1)*dh` of each
/// of `w_q`, `w_k`, `w_v`.
#[derive(Clone, Debug)]
pub(crate) struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> GResult<Self> {
        Ok(MultiHeadAttention {
            w_q: store.add_glorot(format!("{name}.w_q"), dim, dim, rng)?,
            w_k: store.add_glorot(format!("{name}.w_k"), dim, dim, rng)?,
            w_v: store.add_glorot(format!("{name}.w_v"), dim, dim, rng)?,
            w_o: store.add_glorot(format!("{name}.w_o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `queries` (n x d) attend over `memory` (m x d). `mask` is added to
    /// every head's n x m score matrix.
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, mask: Option<Var>) -> GResult<Var> {
        let (wq, wk, wv, wo) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v), g.param(self.w_o));
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as Real).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_bt(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let p = g.softmax_rows(scores);
            outs.push(g.matmul(p, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        g.matmul(cat, wo)
    }
}

/// `relu(x W1 + b1) W2 + b2`
#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> GResult<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> GResult<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// Mean over rows as a `1 x c` row.
pub(crate) fn mean_rows(g: &mut Graph, x: Var) -> GResult<Var> {
    let n = g.dims(x).0;
    let w = g.constant(Tensor::filled(&[1, n], 1.0 / n as Real));
    g.matmul(w, x)
}

/// Dropout that is the identity when `rng` is `None` (evaluation).
pub(crate) fn maybe_dropout(g: &mut Graph, x: Var, rate: Real, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(r) => g.dropout(x, rate, r),
        None => x,
    }
}
