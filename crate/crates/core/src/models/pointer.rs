use numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::copy::{mix_output, CopyHead, CopyHeadDims, MixtureDistribution};
use super::layers::{maybe_dropout, mean_rows, GResult, Linear, LstmLayer, LstmState};
use super::vocab::{EncodedPair, EncodedSource, Vocab, START_ID};
use super::{check_source, read_step, Seq2Seq, StepOutputs};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointerGenConfig {
    pub emb_dim: usize,
    /// Per direction.
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_hidden: usize,
    pub dec_layers: usize,
    /// Width of the copy attention head.
    pub attn_dim: usize,
    pub dropout: Real,
    /// Fixes `alpha_mix` instead of learning it; `Some(0.0)` removes copying.
    pub alpha_pin: Option<Real>,
    pub init_seed: u64,
}

impl Default for PointerGenConfig {
    fn default() -> Self {
        PointerGenConfig {
            emb_dim: 128,
            enc_hidden: 128,
            enc_layers: 2,
            dec_hidden: 256,
            dec_layers: 2,
            attn_dim: 128,
            dropout: 0.3,
            alpha_pin: None,
            init_seed: 0,
        }
    }
}

impl PointerGenConfig {
    fn validate(&self) -> Result<()> {
        let sizes = [self.emb_dim, self.enc_hidden, self.enc_layers, self.dec_hidden, self.dec_layers, self.attn_dim];
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument("pointer-generator sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(a) = self.alpha_pin {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidArgument(format!("alpha_pin {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Bidirectional LSTM encoder, LSTM decoder with input feeding, and a copy
/// attention head whose context also feeds the vocabulary projection.
#[derive(Clone, Debug)]
pub struct PointerGenLstm {
    pub config: PointerGenConfig,
    vocab: Vocab,
    params: ParamStore,
    emb: ParamId,
    encoder: Vec<(LstmLayer, LstmLayer)>,
    bridge: Vec<Linear>,
    decoder: Vec<LstmLayer>,
    pub copy: CopyHead,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct LstmDecodeState {
    layers: Vec<(Tensor, Tensor)>,
    context: Tensor,
}

pub struct LstmMemory {
    keys: Tensor,
    values: Tensor,
    init: LstmDecodeState,
    source: EncodedSource,
}

struct DecVars {
    layers: Vec<LstmState>,
    context: Var,
}

impl PointerGenLstm {
    pub fn new(config: PointerGenConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let c = &config;
        let emb = params.add_uniform("emb", &[vocab.len(), c.emb_dim], 0.1, &mut rng)?;
        let mut encoder = Vec::with_capacity(c.enc_layers);
        for l in 0..c.enc_layers {
            let input = if l == 0 { c.emb_dim } else { 2 * c.enc_hidden };
            let f = LstmLayer::new(&mut params, &format!("enc{l}.fwd"), input, c.enc_hidden, &mut rng)?;
            let b = LstmLayer::new(&mut params, &format!("enc{l}.bwd"), input, c.enc_hidden, &mut rng)?;
            encoder.push((f, b));
        }
        let mut bridge = Vec::with_capacity(c.dec_layers);
        let mut decoder = Vec::with_capacity(c.dec_layers);
        for l in 0..c.dec_layers {
            bridge.push(Linear::new(&mut params, &format!("bridge{l}"), 2 * c.enc_hidden, c.dec_hidden, &mut rng)?);
            let input = if l == 0 { c.emb_dim + c.attn_dim } else { c.dec_hidden };
            decoder.push(LstmLayer::new(&mut params, &format!("dec{l}"), input, c.dec_hidden, &mut rng)?);
        }
        let dims = CopyHeadDims { query_in: c.dec_hidden, memory_in: 2 * c.enc_hidden, head: c.attn_dim };
        let copy = CopyHead::new(&mut params, "copy", dims, &mut rng)?;
        let out = Linear::new(&mut params, "out", c.dec_hidden + c.attn_dim, vocab.len(), &mut rng)?;
        Ok(PointerGenLstm { config, vocab, params, emb, encoder, bridge, decoder, copy, out })
    }

    fn encode_graph(&self, g: &mut Graph, ids: &[usize], dropout: &mut Option<&mut ChaCha8Rng>) -> GResult<Var> {
        let emb = g.param(self.emb);
        let mut x = g.gather_rows(emb, ids)?;
        x = maybe_dropout(g, x, self.config.dropout, dropout);
        for (l, (fwd, bwd)) in self.encoder.iter().enumerate() {
            let f = fwd.run(g, x, false)?;
            let b = bwd.run(g, x, true)?;
            let f = g.concat_rows(&f)?;
            let b = g.concat_rows(&b)?;
            x = g.concat_cols(&[f, b])?;
            if l + 1 < self.encoder.len() {
                x = maybe_dropout(g, x, self.config.dropout, dropout);
            }
        }
        Ok(x)
    }

    /// Encoder outputs `H_e` (`src_len x 2·enc_hidden`) in evaluation mode.
    pub fn encode(&self, source_ids: &[usize]) -> Result<Tensor> {
        check_source(source_ids)?;
        let mut g = Graph::new(&self.params);
        let h = self.encode_graph(&mut g, source_ids, &mut None)?;
        Ok(g.value(h).clone())
    }

    fn initial_vars(&self, g: &mut Graph, encoded: Var) -> GResult<DecVars> {
        let mean = mean_rows(g, encoded)?;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for b in &self.bridge {
            let h = b.forward(g, mean)?;
            let h = g.tanh(h);
            let c = g.constant(Tensor::zeros(&[1, self.config.dec_hidden]));
            layers.push(LstmState { h, c });
        }
        let context = g.constant(Tensor::zeros(&[1, self.config.attn_dim]));
        Ok(DecVars { layers, context })
    }

    /// One decoder step: returns the new state, the top hidden row and the
    /// copy distribution row.
    fn dec_step(
        &self,
        g: &mut Graph,
        emb_row: Var,
        prev: &DecVars,
        keys: Var,
        values: Var,
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> GResult<(DecVars, Var, Var)> {
        let mut input = g.concat_cols(&[emb_row, prev.context])?;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for (l, (layer, state)) in self.decoder.iter().zip(&prev.layers).enumerate() {
            if l > 0 {
                input = maybe_dropout(g, input, self.config.dropout, dropout);
            }
            let p = layer.project_inputs(g, input)?;
            let s = layer.step(g, p, state)?;
            input = s.h;
            layers.push(s);
        }
        let h_top = input;
        let att = self.copy.attend(g, h_top, keys, values)?;
        Ok((DecVars { layers, context: att.context }, h_top, att.p_copy))
    }

    /// Vocabulary distribution, gate and mixture for stacked step rows.
    fn head(
        &self,
        g: &mut Graph,
        h: Var,
        context: Var,
        p_copy: Var,
        source: &EncodedSource,
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> GResult<(StepOutputs, Var)> {
        let hc = g.concat_cols(&[h, context])?;
        let hc = maybe_dropout(g, hc, self.config.dropout, dropout);
        let logits = self.out.forward(g, hc)?;
        let p_vocab = g.softmax_rows(logits);
        let alpha = match self.config.alpha_pin {
            Some(a) => g.constant(Tensor::filled(&[g.dims(h).0, 1], a)),
            None => self.copy.gate(g, context, h)?,
        };
        let p_output = mix_output(g, p_vocab, p_copy, alpha, &source.ext_ids, source.ext_size(&self.vocab))?;
        Ok((StepOutputs { p_output, alpha: Some(alpha), p_copy: Some(p_copy) }, p_vocab))
    }

    fn state_from_vars(g: &Graph, v: &DecVars) -> LstmDecodeState {
        LstmDecodeState {
            layers: v.layers.iter().map(|s| (g.value(s.h).clone(), g.value(s.c).clone())).collect(),
            context: g.value(v.context).clone(),
        }
    }

    fn vars_from_state(g: &mut Graph, s: &LstmDecodeState) -> DecVars {
        DecVars {
            layers: s
                .layers
                .iter()
                .map(|(h, c)| LstmState { h: g.constant(h.clone()), c: g.constant(c.clone()) })
                .collect(),
            context: g.constant(s.context.clone()),
        }
    }
}

impl Seq2Seq for PointerGenLstm {
    type Memory = LstmMemory;
    type State = LstmDecodeState;

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
        let mut dropout = dropout;
        let encoded = self.encode_graph(g, &pair.source.ids, &mut dropout)?;
        let (keys, values) = self.copy.keys_values(g, encoded)?;
        let mut vars = self.initial_vars(g, encoded)?;
        let inputs: Vec<usize> = std::iter::once(START_ID)
            .chain(pair.target[..pair.target.len() - 1].iter().map(|&t| self.vocab.input_id(t)))
            .collect();
        let emb = g.param(self.emb);
        let x = g.gather_rows(emb, &inputs)?;
        let x = maybe_dropout(g, x, self.config.dropout, &mut dropout);
        let (mut hs, mut ctxs, mut copies) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..inputs.len() {
            let row = g.row(x, t)?;
            let (next, h, p) = self.dec_step(g, row, &vars, keys, values, &mut dropout)?;
            hs.push(h);
            ctxs.push(next.context);
            copies.push(p);
            vars = next;
        }
        let h = g.concat_rows(&hs)?;
        let c = g.concat_rows(&ctxs)?;
        let p = g.concat_rows(&copies)?;
        Ok(self.head(g, h, c, p, &pair.source, &mut dropout)?.0)
    }

    fn start(&self, source: &EncodedSource) -> Result<(LstmMemory, LstmDecodeState)> {
        check_source(&source.ids)?;
        let mut g = Graph::new(&self.params);
        let encoded = self.encode_graph(&mut g, &source.ids, &mut None)?;
        let (k, v) = self.copy.keys_values(&mut g, encoded)?;
        let init = self.initial_vars(&mut g, encoded)?;
        let init = Self::state_from_vars(&g, &init);
        let mem = LstmMemory {
            keys: g.value(k).clone(),
            values: g.value(v).clone(),
            init: init.clone(),
            source: source.clone(),
        };
        Ok((mem, init))
    }

    fn step(
        &self,
        memory: &LstmMemory,
        state: &LstmDecodeState,
        prev: usize,
    ) -> Result<(MixtureDistribution, LstmDecodeState)> {
        let mut g = Graph::new(&self.params);
        let keys = g.constant(memory.keys.clone());
        let values = g.constant(memory.values.clone());
        let vars = Self::vars_from_state(&mut g, state);
        let emb = g.param(self.emb);
        let row = g.gather_rows(emb, &[self.vocab.input_id(prev)])?;
        let (next, h, p) = self.dec_step(&mut g, row, &vars, keys, values, &mut None)?;
        let (out, p_vocab) = self.head(&mut g, h, next.context, p, &memory.source, &mut None)?;
        let dist = read_step(&g, p_vocab, &out, 0);
        debug_assert!((dist.total() - 1.0).abs() < 1e-9);
        Ok((dist, Self::state_from_vars(&g, &next)))
    }

    fn config_json(&self) -> String {
        serde_json::json!({
            "arch": "pointer-lstm",
            "config": self.config,
            "vocab_size": self.vocab.len(),
            "vocab": self.vocab.fingerprint(),
        })
        .to_string()
    }
}

impl LstmMemory {
    pub fn source(&self) -> &EncodedSource {
        &self.source
    }

    pub fn initial_state(&self) -> &LstmDecodeState {
        &self.init
    }
}
