use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_pairs, CopyLossConfig, TrainConfig, TrainReport};
use crate::corpus::{Dataset, Utterance};
use crate::error::{Error, Result};
use crate::models::{decode, DecodeStrategy, Seq2Seq};

/// Produces pseudo-targets for distillation.
pub trait Teacher: Sync {
    fn teach(&self, u: &Utterance, strategy: DecodeStrategy, max_len: usize) -> Result<Vec<String>>;
}

/// Decodes the utterance's model source with a trained model.
pub struct ModelTeacher<'a, M>(pub &'a M);

impl<M: Seq2Seq> Teacher for ModelTeacher<'_, M> {
    fn teach(&self, u: &Utterance, strategy: DecodeStrategy, max_len: usize) -> Result<Vec<String>> {
        Ok(decode(self.0, &u.model_source(), strategy, max_len)?.tokens)
    }
}

/// Emits the gold target.
pub struct OracleTeacher;

impl Teacher for OracleTeacher {
    fn teach(&self, u: &Utterance, _: DecodeStrategy, _: usize) -> Result<Vec<String>> {
        u.reference()
    }
}

/// Emits the content span unchanged.
pub struct ExactCopyTeacher;

impl Teacher for ExactCopyTeacher {
    fn teach(&self, u: &Utterance, _: DecodeStrategy, _: usize) -> Result<Vec<String>> {
        Ok(u.content_surfaces())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Teacher decoding.
    pub decode: DecodeStrategy,
    /// Continue training on the gold targets after the distillation stage.
    pub finetune_on_gold: bool,
    pub max_decode_len: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { decode: DecodeStrategy::Beam(5), finetune_on_gold: true, max_decode_len: 40 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    /// Pseudo-labelled pairs the student trained on.
    pub pseudo_pairs: usize,
    /// Sources where the teacher produced nothing.
    pub skipped: usize,
    pub distill_log: TrainReport,
    pub gold_log: Option<TrainReport>,
}

/// Sequence-level distillation: the teacher labels every training source,
/// the student trains on those labels, then optionally on the gold targets.
#[allow(clippy::too_many_arguments)]
pub fn distill<T: Teacher, M: Seq2Seq>(
    teacher: &T,
    student: &mut M,
    train: &Dataset,
    valid: Option<&Dataset>,
    cfg: &DistillConfig,
    train_cfg: &TrainConfig,
    copy: Option<&CopyLossConfig>,
    mut log: Option<&mut dyn Write>,
) -> Result<DistillReport> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if matches!(cfg.decode, DecodeStrategy::Beam(0)) {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let labels: Vec<Result<Vec<String>>> =
        train.utterances.par_iter().map(|u| teacher.teach(u, cfg.decode, cfg.max_decode_len)).collect();
    let mut pseudo = Vec::with_capacity(train.len());
    let mut skipped = 0;
    for (u, label) in train.iter().zip(labels) {
        let label = label?;
        if label.is_empty() {
            skipped += 1;
        } else {
            pseudo.push((u.model_source(), label));
        }
    }
    if pseudo.is_empty() {
        return Err(Error::Empty("distillation set (teacher produced no output)"));
    }
    let distill_log =
        fit_pairs(student, &pseudo, valid, train_cfg, copy, log.as_mut().map(|w| &mut **w as &mut dyn Write))?;
    let gold_log = if cfg.finetune_on_gold {
        let gold = train.source_target_pairs()?;
        Some(fit_pairs(student, &gold, valid, train_cfg, copy, log)?)
    } else {
        None
    };
    Ok(DistillReport { pseudo_pairs: pseudo.len(), skipped, distill_log, gold_log })
}
