use numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{GResult, Linear};

/// One attention head dedicated to copying plus the mixture gate.
///
/// `p_copy = softmax(q Kᵀ / √d)` with `q = h_d W_q`, `K = H_e W_k`,
/// `V = H_e W_v`; the gate reads `[p_copy V; h_d]`.
#[derive(Clone, Debug)]
pub struct CopyHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub(crate) mix: Linear,
    pub dims: CopyHeadDims,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyHeadDims {
    /// Width of decoder states `h_d`.
    pub query_in: usize,
    /// Width of encoder outputs `H_e`.
    pub memory_in: usize,
    /// Width of one attention head.
    pub head: usize,
}

/// Copy distribution rows and the attention context they produce.
pub(crate) struct CopyAttention {
    pub p_copy: Var,
    pub context: Var,
}

impl CopyHead {
    pub fn new(store: &mut ParamStore, name: &str, dims: CopyHeadDims, rng: &mut ChaCha8Rng) -> GResult<Self> {
        Ok(CopyHead {
            w_q: store.add_glorot(format!("{name}.w_q"), dims.query_in, dims.head, rng)?,
            w_k: store.add_glorot(format!("{name}.w_k"), dims.memory_in, dims.head, rng)?,
            w_v: store.add_glorot(format!("{name}.w_v"), dims.memory_in, dims.head, rng)?,
            mix: Linear::new(store, &format!("{name}.mix"), dims.head + dims.query_in, 1, rng)?,
            dims,
        })
    }

    /// Builds the head around given projection matrices (fresh gate).
    pub(crate) fn with_projections(
        store: &mut ParamStore,
        name: &str,
        dims: CopyHeadDims,
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        rng: &mut ChaCha8Rng,
    ) -> GResult<Self> {
        Ok(CopyHead {
            w_q: store.add(format!("{name}.w_q"), w_q)?,
            w_k: store.add(format!("{name}.w_k"), w_k)?,
            w_v: store.add(format!("{name}.w_v"), w_v)?,
            mix: Linear::new(store, &format!("{name}.mix"), dims.head + dims.query_in, 1, rng)?,
            dims,
        })
    }

    /// `(K, V)` for a memory matrix.
    pub(crate) fn keys_values(&self, g: &mut Graph, memory: Var) -> GResult<(Var, Var)> {
        let wk = g.param(self.w_k);
        let wv = g.param(self.w_v);
        Ok((g.matmul(memory, wk)?, g.matmul(memory, wv)?))
    }

    pub(crate) fn attend(&self, g: &mut Graph, h_d: Var, keys: Var, values: Var) -> GResult<CopyAttention> {
        let wq = g.param(self.w_q);
        let q = g.matmul(h_d, wq)?;
        let scores = g.matmul_bt(q, keys)?;
        let scores = g.scale(scores, 1.0 / (self.dims.head as Real).sqrt());
        let p_copy = g.softmax_rows(scores);
        let context = g.matmul(p_copy, values)?;
        Ok(CopyAttention { p_copy, context })
    }

    /// `alpha_mix = sigmoid(W_mix [context; h_d] + b)`, one row per step.
    pub(crate) fn gate(&self, g: &mut Graph, context: Var, h_d: Var) -> GResult<Var> {
        let x = g.concat_cols(&[context, h_d])?;
        let z = self.mix.forward(g, x)?;
        Ok(g.sigmoid(z))
    }

    pub fn parameter_ids(&self) -> [ParamId; 5] {
        [self.w_q, self.w_k, self.w_v, self.mix.w, self.mix.b]
    }
}

/// `(1 - alpha) p_vocab + alpha scatter(p_copy)` over the extended
/// vocabulary. `p_vocab` is `T x V`, `p_copy` is `T x S`, `alpha` is `T x 1`.
pub(crate) fn mix_output(
    g: &mut Graph,
    p_vocab: Var,
    p_copy: Var,
    alpha: Var,
    src_ext: &[usize],
    ext_size: usize,
) -> GResult<Var> {
    let padded = pad_cols(g, p_vocab, ext_size)?;
    let copy = g.scatter_cols(p_copy, src_ext, ext_size)?;
    let keep = g.rsub_scalar(1.0, alpha)?;
    let a = g.mul(padded, keep)?;
    let b = g.mul(copy, alpha)?;
    g.add(a, b)
}

/// Zero-pads columns up to `width`.
pub(crate) fn pad_cols(g: &mut Graph, x: Var, width: usize) -> GResult<Var> {
    let (r, c) = g.dims(x);
    if width == c {
        return Ok(x);
    }
    let z = g.constant(Tensor::zeros(&[r, width - c]));
    g.concat_cols(&[x, z])
}

/// One decode step's distributions, read back from a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDistribution {
    pub p_vocab: Vec<Real>,
    /// Empty for models without a copy path.
    pub p_copy: Vec<Real>,
    pub alpha_mix: Real,
    /// Over the extended vocabulary.
    pub p_output: Vec<Real>,
}

impl MixtureDistribution {
    /// Probability of producing extended id `id` through the copy path.
    pub fn copy_mass(&self, id: usize, src_ext: &[usize]) -> Real {
        self.alpha_mix * src_ext.iter().zip(&self.p_copy).filter(|(&s, _)| s == id).map(|(_, p)| p).sum::<Real>()
    }

    pub fn total(&self) -> Real {
        self.p_output.iter().sum()
    }
}
