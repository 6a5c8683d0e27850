use std::fmt;
use std::str::FromStr;

use numcore::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vocab::{EncodedSource, END_ID, START_ID};
use super::Seq2Seq;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Extended ids, end symbol excluded.
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Sum of log p_output over scored steps (the end symbol included).
    pub log_prob: Real,
    pub steps: usize,
    pub ended: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis { ids: Vec::new(), tokens: Vec::new(), log_prob: 0.0, steps: 0, ended: false }
    }

    /// Length-normalized log-probability.
    pub fn score(&self) -> Real {
        if self.steps == 0 {
            0.0
        } else {
            self.log_prob / self.steps as Real
        }
    }

    fn extend<M: Seq2Seq>(&self, model: &M, src: &EncodedSource, id: usize, p: Real) -> Self {
        let mut h = self.clone();
        h.log_prob += p.max(1e-300).ln();
        h.steps += 1;
        if id == END_ID {
            h.ended = true;
        } else {
            h.ids.push(id);
            h.tokens.push(model.vocab().ext_token(id, src).to_string());
        }
        h
    }
}

fn argmax(p: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Highest `k` entries, ties to the lower index.
fn top_k(p: &[Real], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Argmax of `p_output` at every step until the end symbol or `max_len`
/// emitted tokens.
pub fn greedy_decode<M: Seq2Seq, S: AsRef<str>>(model: &M, source: &[S], max_len: usize) -> Result<Hypothesis> {
    check_max_len(max_len)?;
    let src = model.vocab().encode_source(source);
    let (mem, mut state) = model.start(&src)?;
    let mut hyp = Hypothesis::empty();
    let mut prev = START_ID;
    while hyp.ids.len() < max_len {
        let (dist, next) = model.step(&mem, &state, prev)?;
        let id = argmax(&dist.p_output);
        hyp = hyp.extend(model, &src, id, dist.p_output[id]);
        if hyp.ended {
            break;
        }
        state = next;
        prev = id;
    }
    Ok(hyp)
}

/// Beam search over length-normalized log-probability. The greedy
/// hypothesis is always a candidate, so the result never scores below it;
/// width 1 reproduces greedy decoding.
pub fn beam_decode<M: Seq2Seq, S: AsRef<str>>(
    model: &M,
    source: &[S],
    max_len: usize,
    beam_width: usize,
) -> Result<Hypothesis> {
    check_max_len(max_len)?;
    if beam_width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let greedy = greedy_decode(model, source, max_len)?;
    if beam_width == 1 {
        return Ok(greedy);
    }
    let src = model.vocab().encode_source(source);
    let (mem, state) = model.start(&src)?;
    let mut live = vec![(Hypothesis::empty(), state)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && finished.len() < beam_width {
        let mut candidates = Vec::new();
        for (hyp, state) in &live {
            let prev = hyp.ids.last().copied().unwrap_or(START_ID);
            let (dist, next) = model.step(&mem, state, prev)?;
            for id in top_k(&dist.p_output, beam_width) {
                let h = hyp.extend(model, &src, id, dist.p_output[id]);
                if h.ended || h.ids.len() >= max_len {
                    finished.push(h);
                } else {
                    candidates.push((h, next.clone()));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.score().total_cmp(&a.0.score()));
        candidates.truncate(beam_width);
        live = candidates;
    }
    let best = finished
        .into_iter()
        .chain(std::iter::once(greedy))
        .reduce(|best, h| if h.score() > best.score() { h } else { best })
        .expect("greedy candidate present");
    Ok(best)
}

/// Serialized as `greedy` or `beam:K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

impl fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeStrategy::Greedy => f.write_str("greedy"),
            DecodeStrategy::Beam(k) => write!(f, "beam:{k}"),
        }
    }
}

impl FromStr for DecodeStrategy {
    type Err = Error;

    /// `greedy` or `beam:K`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "greedy" => Ok(DecodeStrategy::Greedy),
            other => {
                let k =
                    other.strip_prefix("beam:").and_then(|k| k.parse::<usize>().ok()).filter(|&k| k >= 1).ok_or_else(
                        || Error::InvalidArgument(format!("decode strategy {other:?}: expected greedy or beam:K")),
                    )?;
                Ok(DecodeStrategy::Beam(k))
            }
        }
    }
}

impl From<DecodeStrategy> for String {
    fn from(s: DecodeStrategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for DecodeStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

pub fn decode<M: Seq2Seq, S: AsRef<str>>(
    model: &M,
    source: &[S],
    strategy: DecodeStrategy,
    max_len: usize,
) -> Result<Hypothesis> {
    match strategy {
        DecodeStrategy::Greedy => greedy_decode(model, source, max_len),
        DecodeStrategy::Beam(k) => beam_decode(model, source, max_len, k),
    }
}

/// Decodes every source, in parallel across rayon workers; output order
/// follows input order.
pub fn decode_all<M: Seq2Seq, S: AsRef<str> + Sync>(
    model: &M,
    sources: &[Vec<S>],
    strategy: DecodeStrategy,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    sources.par_iter().map(|s| decode(model, s, strategy, max_len)).collect()
}
