//! Losses and training loops.
//!
//! Every loop shares the same mechanics: per-example graphs evaluated in
//! parallel, gradients merged in example order, global-norm clipping, Adam
//! with decoupled weight decay, and a best-on-validation snapshot. Dropout
//! masks derive from `(seed, epoch, example index)`, so a run is
//! reproducible bit for bit regardless of the worker count.

mod distill;
mod grid;
mod tagger;

use std::io::Write;
use std::time::Instant;

use numcore::{AdamConfig, AdamState, Gradients, Graph, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use distill::{distill, DistillConfig, DistillReport, ExactCopyTeacher, ModelTeacher, OracleTeacher, Teacher};
pub use grid::{grid_search, GridCell, GridReport, GridSpec};
pub use tagger::{tag_accuracy, tag_pairs, train_tagger};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{em_any, exact_match};
use crate::models::{
    decode_all, denoise_corrupt, DecodeStrategy, EncodedPair, MiniTransformer, NoisePolicy, Seq2Seq, StepOutputs,
};
use crate::text::NormalizationPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopyLossConfig {
    pub lambda: Real,
    pub threshold: Real,
    /// Use `P = alpha_mix` instead of the copy-path probability of the token.
    pub hinge_on_alpha_only: bool,
}

impl Default for CopyLossConfig {
    fn default() -> Self {
        CopyLossConfig { lambda: 0.25, threshold: 0.9, hinge_on_alpha_only: false }
    }
}

impl CopyLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: Real,
    pub weight_decay: Real,
    pub epochs: usize,
    pub seed: u64,
    /// Only teacher forcing is implemented; `false` is rejected.
    pub teacher_forcing: bool,
    pub clip_norm: Real,
    /// Longest output decoded during validation.
    pub max_decode_len: usize,
    /// Stop after this many epochs without a new best.
    pub patience: Option<usize>,
    /// Stop once validation EM reaches this fraction.
    pub target_valid_em: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            epochs: 40,
            seed: 0,
            teacher_forcing: true,
            clip_norm: 5.0,
            max_decode_len: 40,
            patience: None,
            target_valid_em: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.max_decode_len == 0 {
            return Err(Error::InvalidArgument("batch_size, epochs and max_decode_len must be positive".into()));
        }
        // negated comparisons also reject NaN
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate and clip_norm must be positive, weight_decay >= 0".into(),
            ));
        }
        if !self.teacher_forcing {
            return Err(Error::InvalidArgument("only teacher-forced training is supported".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Real,
    pub valid_em: Option<f64>,
    pub valid_em_any: Option<f64>,
    pub valid_loss: Option<Real>,
    /// Seconds since the run started.
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds on return (1-based).
    pub best_epoch: usize,
    pub best_valid_em: Option<f64>,
    /// Probabilities clamped to the log floor during training.
    pub log_clamps: usize,
    pub stopped_early: bool,
}

/// Mean `-log p_output[t, target[t]]` over target positions.
pub fn nll_loss(g: &mut Graph, p_output: Var, target: &[usize]) -> Result<Var> {
    let (rows, _) = g.dims(p_output);
    if rows != target.len() {
        return Err(Error::InvalidArgument(format!("{rows} distributions for {} targets", target.len())));
    }
    let at: Vec<(usize, usize)> = target.iter().enumerate().map(|(t, &y)| (t, y)).collect();
    let p = g.pick(p_output, &at)?;
    let lp = g.log(p);
    let m = g.mean(lp);
    Ok(g.scale(m, -1.0))
}

/// Copy-path mask: `m[t][s] = 1` when source position `s` holds target
/// token `t`. The end and unknown symbols never count as copiable.
fn copy_mask(target: &[usize], src_ext: &[usize]) -> (Tensor, Vec<bool>) {
    let mut m = Tensor::zeros(&[target.len(), src_ext.len()]);
    let mut copiable = vec![false; target.len()];
    for (t, &y) in target.iter().enumerate() {
        if y == crate::models::vocab::END_ID || y == crate::models::vocab::UNK_ID {
            continue;
        }
        for (s, &x) in src_ext.iter().enumerate() {
            if x == y {
                m.set(t, s, 1.0);
                copiable[t] = true;
            }
        }
    }
    (m, copiable)
}

/// `sum_t lambda * max(T - P_t, 0)` over target positions whose token occurs
/// in the source, with `P_t = alpha_t * sum of p_copy over those positions`.
pub fn copy_hinge_loss(
    g: &mut Graph,
    out: &StepOutputs,
    target: &[usize],
    src_ext: &[usize],
    cfg: &CopyLossConfig,
) -> Result<Var> {
    let (Some(alpha), Some(p_copy)) = (out.alpha, out.p_copy) else {
        return Err(Error::InvalidArgument("copy loss needs a model with a copy path".into()));
    };
    let (rows, cols) = g.dims(p_copy);
    if rows != target.len() || cols != src_ext.len() {
        return Err(Error::InvalidArgument(format!(
            "p_copy is {rows}x{cols} for {} targets and {} source tokens",
            target.len(),
            src_ext.len()
        )));
    }
    let (mask, copiable) = copy_mask(target, src_ext);
    if !copiable.iter().any(|&c| c) {
        return Ok(g.scalar(0.0));
    }
    let p = if cfg.hinge_on_alpha_only {
        alpha
    } else {
        let m = g.constant(mask);
        let masked = g.mul(p_copy, m)?;
        let ones = g.constant(Tensor::filled(&[cols, 1], 1.0));
        let mass = g.matmul(masked, ones)?;
        g.mul(mass, alpha)?
    };
    let gap = g.rsub_scalar(cfg.threshold, p)?;
    let hinge = g.relu(gap);
    let select = Tensor::matrix(rows, 1, copiable.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())?;
    let select = g.constant(select);
    let hinge = g.mul(hinge, select)?;
    let total = g.sum(hinge);
    Ok(g.scale(total, cfg.lambda))
}

/// `nll + hinge / len(target)` for one pair. The hinge is a per-token
/// penalty on top of per-token cross-entropy, so both are averaged over the
/// same positions; otherwise `lambda` would scale with sentence length.
pub fn seq2seq_loss<M: Seq2Seq>(
    model: &M,
    g: &mut Graph,
    pair: &EncodedPair,
    copy: Option<&CopyLossConfig>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let out = model.teacher_forced(g, pair, dropout)?;
    let nll = nll_loss(g, out.p_output, &pair.target)?;
    match copy {
        Some(cfg) => {
            let hinge = copy_hinge_loss(g, &out, &pair.target, &pair.source.ext_ids, cfg)?;
            let hinge = g.scale(hinge, 1.0 / pair.target.len() as Real);
            Ok(g.add(nll, hinge)?)
        }
        None => Ok(nll),
    }
}

/// How much the copy path is used on copiable target tokens under teacher
/// forcing (evaluation mode).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CopyUsage {
    /// Mean copy-path probability of the gold token.
    pub mean_p: f64,
    /// Fraction of positions with `alpha_mix > 0.5`.
    pub alpha_above_half: f64,
    pub positions: usize,
}

pub fn copy_usage<M: Seq2Seq>(model: &M, pairs: &[(Vec<String>, Vec<String>)]) -> Result<CopyUsage> {
    let per_pair: Vec<Result<(f64, usize, usize)>> = pairs
        .par_iter()
        .map(|(s, t)| {
            let pair = model.vocab().encode_pair(s, t);
            let mut g = Graph::new(model.params());
            let out = model.teacher_forced(&mut g, &pair, None)?;
            let (Some(alpha), Some(p_copy)) = (out.alpha, out.p_copy) else {
                return Ok((0.0, 0, 0));
            };
            let (mask, copiable) = copy_mask(&pair.target, &pair.source.ext_ids);
            let (a, pc) = (g.value(alpha), g.value(p_copy));
            let (mut sum_p, mut n, mut above) = (0.0, 0, 0);
            for (t, _) in copiable.iter().enumerate().filter(|(_, &c)| c) {
                let mass: Real = (0..mask.cols()).map(|s| mask.get(t, s) * pc.get(t, s)).sum();
                sum_p += (a.get(t, 0) * mass) as f64;
                n += 1;
                if a.get(t, 0) > 0.5 {
                    above += 1;
                }
            }
            Ok((sum_p, n, above))
        })
        .collect();
    let (mut sum_p, mut n, mut above) = (0.0, 0, 0);
    for r in per_pair {
        let (s, k, a) = r?;
        sum_p += s;
        n += k;
        above += a;
    }
    if n == 0 {
        return Ok(CopyUsage::default());
    }
    Ok(CopyUsage { mean_p: sum_p / n as f64, alpha_above_half: above as f64 / n as f64, positions: n })
}

/// Validation scores; `em` drives best-checkpoint selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ValidScores {
    pub em: Option<f64>,
    pub em_any: Option<f64>,
    pub loss: Option<Real>,
}

/// What a training loop optimizes.
pub(crate) trait Objective: Sync {
    type Example: Sync;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn loss(&self, g: &mut Graph, example: &Self::Example, dropout: Option<&mut ChaCha8Rng>) -> Result<Var>;
    fn validate(&self) -> Result<ValidScores>;
}

/// Seed for the dropout stream of one example.
fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z =
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Without validation scores the latest epoch always wins.
fn better(em: Option<f64>, loss: Option<Real>, best: Option<(Option<f64>, Option<Real>)>) -> bool {
    let Some((best_em, best_loss)) = best else { return true };
    if em.is_none() && loss.is_none() {
        return true;
    }
    let em = em.unwrap_or(f64::NEG_INFINITY);
    let best_em = best_em.unwrap_or(f64::NEG_INFINITY);
    if em != best_em {
        return em > best_em;
    }
    match (loss, best_loss) {
        (Some(l), Some(b)) => l < b,
        _ => false,
    }
}

/// The shared loop. `examples(epoch)` yields that epoch's training examples
/// (fixed for supervised training, freshly corrupted for denoising).
pub(crate) fn run<O: Objective>(
    objective: &mut O,
    mut examples: impl FnMut(usize) -> Result<Vec<O::Example>>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut adam =
        AdamState::new(AdamConfig { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let mut report =
        TrainReport { log: Vec::new(), best_epoch: 0, best_valid_em: None, log_clamps: 0, stopped_early: false };
    let mut best: Option<(Option<f64>, Option<Real>)> = None;
    let mut best_params = objective.params().clone();
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let data = examples(epoch)?;
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let last_good = objective.params().clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, epoch, usize::MAX)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let obj = &*objective;
            let results: Vec<Result<(Real, Gradients, usize)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new(obj.params());
                    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, epoch, i));
                    let loss = obj.loss(&mut g, &data[i], Some(&mut rng))?;
                    let value = g.value(loss).item();
                    if !value.is_finite() {
                        return Err(Error::Diverged { epoch, message: format!("loss {value} on example {i}") });
                    }
                    Ok((value, g.backward(loss)?, g.log_clamps()))
                })
                .collect();
            let params = objective.params_mut();
            params.zero_grad();
            let scale = 1.0 / batch.len() as Real;
            let mut failure = None;
            for r in results {
                match r {
                    Ok((value, grads, clamps)) => {
                        loss_sum += value;
                        report.log_clamps += clamps;
                        params.accumulate(&grads, scale);
                    }
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            if failure.is_none() {
                params.clip_grad_norm(cfg.clip_norm);
                if let Err(e) = adam.step(params) {
                    failure = Some(Error::Diverged { epoch, message: e.to_string() });
                }
            }
            if let Some(e) = failure {
                let restore = if best.is_some() { &best_params } else { &last_good };
                objective.params_mut().copy_values_from(restore)?;
                return Err(e);
            }
        }
        let scores = objective.validate()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.len() as Real,
            valid_em: scores.em,
            valid_em_any: scores.em_any,
            valid_loss: scores.loss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w)?;
        }
        report.log.push(record);
        if better(scores.em, scores.loss, best) {
            best = Some((scores.em, scores.loss));
            best_params = objective.params().clone();
            report.best_epoch = epoch;
            report.best_valid_em = scores.em;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let reached = matches!((cfg.target_valid_em, scores.em), (Some(t), Some(em)) if em >= t);
        let patience_out = cfg.patience.is_some_and(|p| since_best >= p);
        if (reached || patience_out) && epoch < cfg.epochs {
            report.stopped_early = true;
            break;
        }
    }
    objective.params_mut().copy_values_from(&best_params)?;
    Ok(report)
}

/// Supervised seq2seq objective over encoded pairs, validated by greedy
/// decoding of the validation utterances.
pub(crate) struct Seq2SeqObjective<'a, M> {
    pub model: &'a mut M,
    pub copy: Option<CopyLossConfig>,
    pub valid: Option<&'a Dataset>,
    pub max_decode_len: usize,
}

impl<M: Seq2Seq> Objective for Seq2SeqObjective<'_, M> {
    type Example = EncodedPair;

    fn params(&self) -> &ParamStore {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn loss(&self, g: &mut Graph, pair: &EncodedPair, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        seq2seq_loss(&*self.model, g, pair, self.copy.as_ref(), dropout)
    }

    fn validate(&self) -> Result<ValidScores> {
        match self.valid {
            Some(ds) if !ds.is_empty() => validate_seq2seq(&*self.model, ds, self.max_decode_len),
            _ => Ok(ValidScores { em: None, em_any: None, loss: None }),
        }
    }
}

pub(crate) fn validate_seq2seq<M: Seq2Seq>(model: &M, ds: &Dataset, max_len: usize) -> Result<ValidScores> {
    let sources: Vec<Vec<String>> = ds.iter().map(|u| u.model_source()).collect();
    let hyps = decode_all(model, &sources, DecodeStrategy::Greedy, max_len)?;
    let policy = NormalizationPolicy::default();
    let (mut em, mut any) = (0usize, 0usize);
    for (u, h) in ds.iter().zip(&hyps) {
        em += exact_match(&h.tokens, u, policy)? as usize;
        any += em_any(&h.tokens, u, policy)? as usize;
    }
    let pairs = ds.source_target_pairs()?;
    let losses: Vec<Result<Real>> = pairs
        .par_iter()
        .map(|(s, t)| {
            let pair = model.vocab().encode_pair(s, t);
            let mut g = Graph::new(model.params());
            let out = model.teacher_forced(&mut g, &pair, None)?;
            let l = nll_loss(&mut g, out.p_output, &pair.target)?;
            Ok(g.value(l).item())
        })
        .collect();
    let mut loss = 0.0;
    for l in losses {
        loss += l?;
    }
    let n = ds.len() as f64;
    Ok(ValidScores { em: Some(em as f64 / n), em_any: Some(any as f64 / n), loss: Some(loss / n as Real) })
}

/// Teacher-forced training on `(source, target)` token pairs.
pub fn fit_pairs<M: Seq2Seq>(
    model: &mut M,
    pairs: &[(Vec<String>, Vec<String>)],
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    copy: Option<&CopyLossConfig>,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(c) = copy {
        c.validate()?;
    }
    let encoded: Vec<EncodedPair> = pairs.iter().map(|(s, t)| model.vocab().encode_pair(s, t)).collect();
    let mut objective = Seq2SeqObjective { model, copy: copy.copied(), valid, max_decode_len: cfg.max_decode_len };
    run(&mut objective, |_| Ok(encoded.clone()), cfg, log)
}

/// Trains on the model-source/gold-target pairs of `train`, keeping the
/// parameters with the best validation EM (ties by validation loss).
pub fn train_seq2seq<M: Seq2Seq>(
    model: &mut M,
    train: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    copy: Option<&CopyLossConfig>,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let pairs = train.source_target_pairs()?;
    fit_pairs(model, &pairs, valid, cfg, copy, log)
}

/// Denoising objective: reconstruct each sentence from a corrupted copy.
/// Corruptions are redrawn every epoch. Without validation data the kept
/// parameters are the last epoch's.
pub fn pretrain_denoising<S: AsRef<str> + Sync>(
    model: &mut MiniTransformer,
    corpus: &[Vec<S>],
    noise: NoisePolicy,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let corpus: Vec<&Vec<S>> = corpus.iter().filter(|s| !s.is_empty()).collect();
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    if !(0.0..=1.0).contains(&noise.mask_prob) {
        return Err(Error::InvalidArgument(format!("mask_prob {} outside [0, 1]", noise.mask_prob)));
    }
    let vocab = model.vocab().clone();
    let seed = cfg.seed;
    let examples = |epoch: usize| -> Result<Vec<EncodedPair>> {
        Ok(corpus
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (corrupted, target) = denoise_corrupt(s, noise, example_seed(seed ^ 0xD15E, epoch, i));
                vocab.encode_pair(&corrupted, &target)
            })
            .collect())
    };
    let mut objective = Seq2SeqObjective { model, copy: None, valid: None, max_decode_len: cfg.max_decode_len };
    run(&mut objective, examples, cfg, log)
}

/// Grafts a copy head initialized from the last decoder layer's
/// cross-attention, then fine-tunes with `nll + hinge`.
pub fn finetune_with_copy(
    model: &mut MiniTransformer,
    train: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    copy: &CopyLossConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if model.copy_head().is_some() {
        return Err(Error::InvalidArgument("model already has a copy head".into()));
    }
    model.graft_copy_head(cfg.seed)?;
    train_seq2seq(model, train, valid, cfg, Some(copy), log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_seeds_differ() {
        let a = example_seed(1, 1, 0);
        assert_ne!(a, example_seed(1, 1, 1));
        assert_ne!(a, example_seed(1, 2, 0));
        assert_ne!(a, example_seed(2, 1, 0));
        assert_eq!(a, example_seed(1, 1, 0));
    }

    #[test]
    fn best_prefers_em_then_loss() {
        assert!(better(Some(0.5), Some(1.0), None));
        assert!(better(Some(0.6), Some(9.0), Some((Some(0.5), Some(1.0)))));
        assert!(better(Some(0.5), Some(0.9), Some((Some(0.5), Some(1.0)))));
        assert!(!better(Some(0.5), Some(1.0), Some((Some(0.5), Some(1.0)))));
        assert!(better(None, None, Some((None, None))));
    }
}
