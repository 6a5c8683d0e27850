use std::io::Write;

use numcore::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{run, Objective, TrainConfig, TrainReport, ValidScores};
use crate::corpus::Dataset;
use crate::editops::{to_tags, PhraseVocabulary, TagSequence, Tagged};
use crate::error::{Error, Result};
use crate::metrics::{em_any, exact_match};
use crate::models::CrfTagger;
use crate::text::NormalizationPolicy;

/// Converts `(content, target)` pairs to tags under `phrases`.
pub fn tag_pairs<A: AsRef<str>, B: AsRef<str>>(
    pairs: &[(Vec<A>, Vec<B>)],
    phrases: &PhraseVocabulary,
) -> Vec<(Vec<String>, Tagged)> {
    pairs
        .iter()
        .map(|(s, t)| (s.iter().map(|x| x.as_ref().to_string()).collect(), to_tags(s, t, Some(phrases))))
        .collect()
}

/// Fraction of slots whose Viterbi tag equals the gold tag.
pub fn tag_accuracy(tagger: &CrfTagger, tagged: &[(Vec<String>, TagSequence)]) -> Result<f64> {
    let counts: Vec<Result<(usize, usize)>> = tagged
        .par_iter()
        .map(|(content, gold)| {
            let pred = tagger.predict(content)?;
            let hits = pred.tags.iter().zip(&gold.tags).filter(|(a, b)| a == b).count();
            Ok((hits, gold.len()))
        })
        .collect();
    let (mut hits, mut total) = (0, 0);
    for c in counts {
        let (h, n) = c?;
        hits += h;
        total += n;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

struct TaggerObjective<'a> {
    tagger: &'a mut CrfTagger,
    valid: Option<&'a Dataset>,
}

impl Objective for TaggerObjective<'_> {
    type Example = (Vec<String>, TagSequence);

    fn params(&self) -> &ParamStore {
        self.tagger.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.tagger.params_mut()
    }

    fn loss(&self, g: &mut Graph, (content, tags): &Self::Example, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let ll = self.tagger.loglik_graph(g, content, tags, dropout)?;
        Ok(g.scale(ll, -1.0))
    }

    fn validate(&self) -> Result<ValidScores> {
        let Some(ds) = self.valid.filter(|d| !d.is_empty()) else {
            return Ok(ValidScores { em: None, em_any: None, loss: None });
        };
        let policy = NormalizationPolicy::default();
        let tagger = &*self.tagger;
        let results: Vec<Result<(bool, bool)>> = ds
            .utterances
            .par_iter()
            .map(|u| {
                let pred = tagger.rephrase(&u.content_surfaces())?;
                Ok((exact_match(&pred, u, policy)?, em_any(&pred, u, policy)?))
            })
            .collect();
        let (mut em, mut any) = (0, 0);
        for r in results {
            let (e, a) = r?;
            em += e as usize;
            any += a as usize;
        }
        let n = ds.len() as f64;
        Ok(ValidScores { em: Some(em as f64 / n), em_any: Some(any as f64 / n), loss: None })
    }
}

/// Maximizes the CRF log-likelihood of the gold tags. Every training pair
/// must be covered by the tagger's phrase vocabulary.
pub fn train_tagger(
    tagger: &mut CrfTagger,
    train: &[(Vec<String>, Tagged)],
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut examples = Vec::with_capacity(train.len());
    for (i, (content, tagged)) in train.iter().enumerate() {
        match tagged {
            Tagged::Covered(tags) => {
                tagger.tag_ids(tags)?;
                examples.push((content.clone(), tags.clone()));
            }
            Tagged::NotCovered { .. } => return Err(Error::NotCovered(i)),
        }
    }
    let mut objective = TaggerObjective { tagger, valid };
    run(&mut objective, |_| Ok(examples.clone()), cfg, log)
}
