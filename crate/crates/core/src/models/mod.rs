//! Sequence models: the pointer-generator LSTM, the mini transformer with a
//! graftable copy head, the CRF edit tagger, and decoding.
//!
//! Both sequence-to-sequence models implement [`Seq2Seq`], which exposes a
//! teacher-forced graph for training and a step function for decoding. Every
//! step yields a [`MixtureDistribution`] over the extended vocabulary, so
//! copied source tokens unknown to the vocabulary can be emitted.

mod copy;
pub mod crf;
mod decode;
mod layers;
mod pointer;
mod saved;
mod transformer;
pub mod vocab;

use numcore::{Graph, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use copy::{CopyHead, CopyHeadDims, MixtureDistribution};
pub use crf::{crf_log_partition, crf_loglik, crf_path_score, crf_viterbi, CrfTagger, TaggerConfig};
pub use decode::{beam_decode, decode, decode_all, greedy_decode, DecodeStrategy, Hypothesis};
pub use pointer::{PointerGenConfig, PointerGenLstm};
pub use saved::{AnyModel, ModelSpec, MODEL_FILE, PHRASES_FILE, VOCAB_FILE};
pub use transformer::{copy_head_init, MiniTransformer, TransformerConfig};
pub use vocab::{EncodedPair, EncodedSource, Vocab};

use crate::error::{Error, Result};

/// Teacher-forced per-step outputs, one row per target position.
#[derive(Clone, Copy, Debug)]
pub struct StepOutputs {
    /// `T x V_ext`, rows sum to 1.
    pub p_output: Var,
    /// `T x 1`; `None` without a copy path.
    pub alpha: Option<Var>,
    /// `T x S`; `None` without a copy path.
    pub p_copy: Option<Var>,
}

pub trait Seq2Seq: Sync {
    /// Per-source encoder results reused across decode steps.
    type Memory: Send + Sync;
    type State: Clone;

    fn vocab(&self) -> &Vocab;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the teacher-forced forward pass of `pair` on `g`, which must
    /// be built over [`Seq2Seq::params`]. `dropout` is `None` in evaluation.
    fn teacher_forced(
        &self,
        g: &mut Graph,
        pair: &EncodedPair,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutputs>;

    fn start(&self, source: &EncodedSource) -> Result<(Self::Memory, Self::State)>;

    /// One decoding step after emitting extended id `prev` (the start symbol
    /// first).
    fn step(
        &self,
        memory: &Self::Memory,
        state: &Self::State,
        prev: usize,
    ) -> Result<(MixtureDistribution, Self::State)>;

    /// Serialized architecture config, hashed into checkpoints.
    fn config_json(&self) -> String;
}

/// Reads row `r` of each per-step output into a [`MixtureDistribution`].
pub(crate) fn read_step(g: &Graph, p_vocab: Var, out: &StepOutputs, r: usize) -> MixtureDistribution {
    MixtureDistribution {
        p_vocab: g.value(p_vocab).row_slice(r).to_vec(),
        p_copy: out.p_copy.map(|v| g.value(v).row_slice(r).to_vec()).unwrap_or_default(),
        alpha_mix: out.alpha.map(|v| g.value(v).get(r, 0)).unwrap_or(0.0),
        p_output: g.value(out.p_output).row_slice(r).to_vec(),
    }
}

pub(crate) fn check_source(ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty source".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisePolicy {
    pub mask_prob: f64,
    /// Collapse each run of masked tokens into a single mask symbol.
    pub span_infill: bool,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        NoisePolicy { mask_prob: 0.15, span_infill: true }
    }
}

/// Masks each token independently with `mask_prob`; returns the corrupted
/// sequence and the original as reconstruction target.
pub fn denoise_corrupt<S: AsRef<str>>(tokens: &[S], policy: NoisePolicy, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corrupted = Vec::with_capacity(tokens.len());
    let mut in_span = false;
    for t in tokens {
        if rng.gen_bool(policy.mask_prob.clamp(0.0, 1.0)) {
            if !(policy.span_infill && in_span) {
                corrupted.push(vocab::MASK.to_string());
            }
            in_span = true;
        } else {
            corrupted.push(t.as_ref().to_string());
            in_span = false;
        }
    }
    (corrupted, tokens.iter().map(|t| t.as_ref().to_string()).collect())
}
