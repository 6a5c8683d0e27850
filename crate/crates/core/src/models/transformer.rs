use numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::copy::{mix_output, pad_cols, CopyHead, CopyHeadDims, MixtureDistribution};
use super::layers::{maybe_dropout, FeedForward, GResult, LayerNorm, Linear, MultiHeadAttention};
use super::vocab::{EncodedPair, EncodedSource, Vocab, START_ID};
use super::{check_source, read_step, Seq2Seq, StepOutputs};
use crate::error::{Error, Result};

const MASKED: Real = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: Real,
    /// Longest source or target (end symbol included) the position table covers.
    pub max_len: usize,
    pub init_seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 128,
            heads: 4,
            ff_dim: 256,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.1,
            max_len: 128,
            init_seed: 0,
        }
    }
}

impl TransformerConfig {
    fn validate(&self) -> Result<()> {
        let sizes = [self.d_model, self.heads, self.ff_dim, self.enc_layers, self.max_len];
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument("transformer sizes must be positive".into()));
        }
        if self.dec_layers == 0 {
            return Err(Error::InvalidArgument("transformer needs at least one decoder layer".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Pre-norm self-attention block, shared with the tagger's encoder.
#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> GResult<Self> {
        Ok(EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, rate: Real, dropout: &mut Option<&mut ChaCha8Rng>) -> GResult<Var> {
        let n = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, n, n, None)?;
        let a = maybe_dropout(g, a, rate, dropout);
        let x = g.add(x, a)?;
        let n = self.ln_ff.forward(g, x)?;
        let f = self.ff.forward(g, n)?;
        let f = maybe_dropout(g, f, rate, dropout);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Small pre-norm encoder-decoder. Starts without a copy path; one can be
/// grafted after pretraining with [`MiniTransformer::graft_copy_head`].
#[derive(Clone, Debug)]
pub struct MiniTransformer {
    pub config: TransformerConfig,
    vocab: Vocab,
    params: ParamStore,
    emb: ParamId,
    pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    out: Linear,
    copy: Option<CopyHead>,
}

pub struct TransformerMemory {
    encoded: Tensor,
    keys: Option<(Tensor, Tensor)>,
    source: EncodedSource,
}

impl MiniTransformer {
    pub fn new(config: TransformerConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let c = &config;
        let d = c.d_model;
        let emb = params.add_uniform("emb", &[vocab.len(), d], 0.1, &mut rng)?;
        let pos = params.add_uniform("pos", &[c.max_len, d], 0.1, &mut rng)?;
        let mut encoder = Vec::with_capacity(c.enc_layers);
        for l in 0..c.enc_layers {
            encoder.push(EncoderLayer::new(&mut params, &format!("enc{l}"), d, c.heads, c.ff_dim, &mut rng)?);
        }
        let enc_norm = LayerNorm::new(&mut params, "enc_norm", d)?;
        let mut decoder = Vec::with_capacity(c.dec_layers);
        for l in 0..c.dec_layers {
            let n = format!("dec{l}");
            decoder.push(DecoderLayer {
                ln_self: LayerNorm::new(&mut params, &format!("{n}.ln_self"), d)?,
                self_attn: MultiHeadAttention::new(&mut params, &format!("{n}.self"), d, c.heads, &mut rng)?,
                ln_cross: LayerNorm::new(&mut params, &format!("{n}.ln_cross"), d)?,
                cross_attn: MultiHeadAttention::new(&mut params, &format!("{n}.cross"), d, c.heads, &mut rng)?,
                ln_ff: LayerNorm::new(&mut params, &format!("{n}.ln_ff"), d)?,
                ff: FeedForward::new(&mut params, &format!("{n}.ff"), d, c.ff_dim, &mut rng)?,
            });
        }
        let dec_norm = LayerNorm::new(&mut params, "dec_norm", d)?;
        let out = Linear::new(&mut params, "out", d, vocab.len(), &mut rng)?;
        Ok(MiniTransformer { config, vocab, params, emb, pos, encoder, enc_norm, decoder, dec_norm, out, copy: None })
    }

    pub fn copy_head(&self) -> Option<&CopyHead> {
        self.copy.as_ref()
    }

    /// Adds a copy head initialized from the last decoder layer's
    /// cross-attention heads (see [`copy_head_init`]), with a fresh gate
    /// drawn from `seed`.
    pub fn graft_copy_head(&mut self, seed: u64) -> Result<()> {
        if self.copy.is_some() {
            return Err(Error::InvalidArgument("copy head already grafted".into()));
        }
        let [w_q, w_k, w_v] = copy_head_init(self)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = self.copy_dims();
        self.copy = Some(CopyHead::with_projections(&mut self.params, "copy", dims, w_q, w_k, w_v, &mut rng)?);
        Ok(())
    }

    /// Adds a randomly initialized copy head.
    pub fn graft_random_copy_head(&mut self, seed: u64) -> Result<()> {
        if self.copy.is_some() {
            return Err(Error::InvalidArgument("copy head already grafted".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = self.copy_dims();
        self.copy = Some(CopyHead::new(&mut self.params, "copy", dims, &mut rng)?);
        Ok(())
    }

    fn copy_dims(&self) -> CopyHeadDims {
        let d = self.config.d_model;
        CopyHeadDims { query_in: d, memory_in: d, head: d / self.config.heads }
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], dropout: &mut Option<&mut ChaCha8Rng>) -> GResult<Var> {
        let emb = g.param(self.emb);
        let pos = g.param(self.pos);
        let tokens = g.gather_rows(emb, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather_rows(pos, &positions)?;
        let x = g.add(tokens, p)?;
        Ok(maybe_dropout(g, x, self.config.dropout, dropout))
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n > self.config.max_len {
            return Err(Error::InvalidArgument(format!("{what} length {n} exceeds max_len {}", self.config.max_len)));
        }
        Ok(())
    }

    fn encode_graph(&self, g: &mut Graph, ids: &[usize], dropout: &mut Option<&mut ChaCha8Rng>) -> GResult<Var> {
        let rate = self.config.dropout;
        let mut x = self.embed(g, ids, dropout)?;
        for layer in &self.encoder {
            x = layer.forward(g, x, rate, dropout)?;
        }
        self.enc_norm.forward(g, x)
    }

    /// Encoder outputs `H_e` (`src_len x d_model`) in evaluation mode.
    pub fn encode(&self, source_ids: &[usize]) -> Result<Tensor> {
        check_source(source_ids)?;
        self.check_len(source_ids.len(), "source")?;
        let mut g = Graph::new(&self.params);
        let h = self.encode_graph(&mut g, source_ids, &mut None)?;
        Ok(g.value(h).clone())
    }

    /// Decoder hidden rows for input ids under a causal mask.
    fn decode_graph(
        &self,
        g: &mut Graph,
        memory: Var,
        inputs: &[usize],
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> GResult<Var> {
        let rate = self.config.dropout;
        let t = inputs.len();
        let mut causal = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in i + 1..t {
                causal.set(i, j, MASKED);
            }
        }
        let causal = g.constant(causal);
        let mut x = self.embed(g, inputs, dropout)?;
        for layer in &self.decoder {
            let n = layer.ln_self.forward(g, x)?;
            let a = layer.self_attn.forward(g, n, n, Some(causal))?;
            let a = maybe_dropout(g, a, rate, dropout);
            x = g.add(x, a)?;
            let n = layer.ln_cross.forward(g, x)?;
            let a = layer.cross_attn.forward(g, n, memory, None)?;
            let a = maybe_dropout(g, a, rate, dropout);
            x = g.add(x, a)?;
            let n = layer.ln_ff.forward(g, x)?;
            let f = layer.ff.forward(g, n)?;
            let f = maybe_dropout(g, f, rate, dropout);
            x = g.add(x, f)?;
        }
        self.dec_norm.forward(g, x)
    }

    fn head(
        &self,
        g: &mut Graph,
        h: Var,
        keys: Option<(Var, Var)>,
        source: &EncodedSource,
    ) -> GResult<(StepOutputs, Var)> {
        let logits = self.out.forward(g, h)?;
        let p_vocab = g.softmax_rows(logits);
        let ext = source.ext_size(&self.vocab);
        match (&self.copy, keys) {
            (Some(copy), Some((k, v))) => {
                let att = copy.attend(g, h, k, v)?;
                let alpha = copy.gate(g, att.context, h)?;
                let p_output = mix_output(g, p_vocab, att.p_copy, alpha, &source.ext_ids, ext)?;
                Ok((StepOutputs { p_output, alpha: Some(alpha), p_copy: Some(att.p_copy) }, p_vocab))
            }
            _ => {
                let p_output = pad_cols(g, p_vocab, ext)?;
                Ok((StepOutputs { p_output, alpha: None, p_copy: None }, p_vocab))
            }
        }
    }

    fn copy_keys(&self, g: &mut Graph, memory: Var) -> GResult<Option<(Var, Var)>> {
        self.copy.as_ref().map(|c| c.keys_values(g, memory)).transpose()
    }
}

/// Copy-head projections initialized from the last decoder layer: the
/// elementwise mean over its cross-attention heads of each head's column
/// block of `W_q`, `W_k` and `W_v`.
pub fn copy_head_init(model: &MiniTransformer) -> Result<[Tensor; 3]> {
    let layer =
        model.decoder.last().ok_or_else(|| Error::InvalidArgument("model has no decoder cross-attention".into()))?;
    let attn = &layer.cross_attn;
    let dh = attn.head_dim();
    let mean = |id: ParamId| -> Result<Tensor> {
        let w = model.params.value(id);
        let (rows, cols) = w.dims();
        if cols != dh * attn.heads {
            return Err(Error::InvalidArgument(format!("cross-attention width {cols} != {} heads x {dh}", attn.heads)));
        }
        let mut out = Tensor::zeros(&[rows, dh]);
        for r in 0..rows {
            for c in 0..dh {
                let s: Real = (0..attn.heads).map(|h| w.get(r, h * dh + c)).sum();
                out.set(r, c, s / attn.heads as Real);
            }
        }
        Ok(out)
    };
    Ok([mean(attn.w_q)?, mean(attn.w_k)?, mean(attn.w_v)?])
}

impl MiniTransformer {
    /// Last decoder layer's cross-attention `(W_q, W_k, W_v)`, `d x d` each.
    pub fn last_cross_attention(&self) -> [&Tensor; 3] {
        let a = &self.decoder.last().expect("validated: at least one decoder layer").cross_attn;
        [self.params.value(a.w_q), self.params.value(a.w_k), self.params.value(a.w_v)]
    }

    pub fn last_cross_attention_ids(&self) -> [ParamId; 3] {
        let a = &self.decoder.last().expect("validated: at least one decoder layer").cross_attn;
        [a.w_q, a.w_k, a.w_v]
    }
}

impl Seq2Seq for MiniTransformer {
    type Memory = TransformerMemory;
    /// Input ids fed so far, the start symbol first.
    type State = Vec<usize>;

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn teacher_forced(
        &self,
        g: &mut Graph,
        pair: &EncodedPair,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutputs> {
        check_source(&pair.source.ids)?;
        self.check_len(pair.source.ids.len(), "source")?;
        self.check_len(pair.target.len(), "target")?;
        let mut dropout = dropout;
        let memory = self.encode_graph(g, &pair.source.ids, &mut dropout)?;
        let inputs: Vec<usize> = std::iter::once(START_ID)
            .chain(pair.target[..pair.target.len() - 1].iter().map(|&t| self.vocab.input_id(t)))
            .collect();
        let h = self.decode_graph(g, memory, &inputs, &mut dropout)?;
        let keys = self.copy_keys(g, memory)?;
        Ok(self.head(g, h, keys, &pair.source)?.0)
    }

    fn start(&self, source: &EncodedSource) -> Result<(TransformerMemory, Vec<usize>)> {
        check_source(&source.ids)?;
        self.check_len(source.ids.len(), "source")?;
        let mut g = Graph::new(&self.params);
        let memory = self.encode_graph(&mut g, &source.ids, &mut None)?;
        let keys = self.copy_keys(&mut g, memory)?.map(|(k, v)| (g.value(k).clone(), g.value(v).clone()));
        let mem = TransformerMemory { encoded: g.value(memory).clone(), keys, source: source.clone() };
        Ok((mem, Vec::new()))
    }

    fn step(
        &self,
        memory: &TransformerMemory,
        state: &Vec<usize>,
        prev: usize,
    ) -> Result<(MixtureDistribution, Vec<usize>)> {
        let mut prefix = state.clone();
        prefix.push(self.vocab.input_id(prev));
        // positions past the table: keep the most recent window
        let start = prefix.len().saturating_sub(self.config.max_len);
        let window = &prefix[start..];
        let mut g = Graph::new(&self.params);
        let enc = g.constant(memory.encoded.clone());
        let h = self.decode_graph(&mut g, enc, window, &mut None)?;
        let last = g.row(h, window.len() - 1)?;
        let keys = memory.keys.as_ref().map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone())));
        let (out, p_vocab) = self.head(&mut g, last, keys, &memory.source)?;
        let dist = read_step(&g, p_vocab, &out, 0);
        debug_assert!((dist.total() - 1.0).abs() < 1e-9);
        Ok((dist, prefix))
    }

    fn config_json(&self) -> String {
        serde_json::json!({
            "arch": "mini-transformer",
            "config": self.config,
            "copy_head": self.copy.is_some(),
            "vocab_size": self.vocab.len(),
            "vocab": self.vocab.fingerprint(),
        })
        .to_string()
    }
}

impl TransformerMemory {
    pub fn source(&self) -> &EncodedSource {
        &self.source
    }
}
