//! Linear-chain CRF over edit tags and the tagger built on it.
//!
//! Tag ids pack an action and an insertion slot: `id = action * (P + 1) +
//! slot` where `P` is the phrase-vocabulary size, action 0 is KEEP, 1 is
//! DELETE, slot 0 means no insertion and slot `k` inserts phrase `k - 1`.

use numcore::{logsumexp, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{maybe_dropout, GResult, LayerNorm, Linear};
use super::transformer::EncoderLayer;
use super::vocab::{Vocab, END_ID};
use crate::editops::{realize, EditAction, EditTag, PhraseVocabulary, TagSequence};
use crate::error::{Error, Result};

const BLOCKED: Real = -1e9;

fn check_shapes(emissions: (usize, usize), transitions: (usize, usize), tags: Option<&[usize]>) -> Result<()> {
    let (len, k) = emissions;
    if len == 0 || k == 0 {
        return Err(Error::InvalidArgument("empty emission matrix".into()));
    }
    if transitions != (k, k) {
        return Err(Error::InvalidArgument(format!("transitions {}x{} for {k} tags", transitions.0, transitions.1)));
    }
    if let Some(tags) = tags {
        if tags.len() != len {
            return Err(Error::InvalidArgument(format!("{} tags for {len} emission rows", tags.len())));
        }
        if let Some(&t) = tags.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("tag {t} out of range for {k} tags")));
        }
    }
    Ok(())
}

/// `score(gold) - log Z` recorded on `g`; a `1 x 1` node.
pub fn crf_loglik(g: &mut Graph, emissions: Var, transitions: Var, gold: &[usize]) -> Result<Var> {
    check_shapes(g.dims(emissions), g.dims(transitions), Some(gold))?;
    let at: Vec<(usize, usize)> = gold.iter().enumerate().map(|(i, &y)| (i, y)).collect();
    let emitted = g.pick(emissions, &at)?;
    let mut score = g.sum(emitted);
    if gold.len() > 1 {
        let pairs: Vec<(usize, usize)> = gold.windows(2).map(|w| (w[0], w[1])).collect();
        let moved = g.pick(transitions, &pairs)?;
        let moved = g.sum(moved);
        score = g.add(score, moved)?;
    }
    let mut alpha = g.row(emissions, 0)?;
    for i in 1..gold.len() {
        let prev = g.transpose(alpha);
        let m = g.add(transitions, prev)?;
        let lse = g.logsumexp_axis0(m);
        let e = g.row(emissions, i)?;
        alpha = g.add(lse, e)?;
    }
    let log_z = g.logsumexp_axis1(alpha);
    Ok(g.sub(score, log_z)?)
}

pub fn crf_path_score(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Result<Real> {
    check_shapes(emissions.dims(), transitions.dims(), Some(tags))?;
    let mut s: Real = tags.iter().enumerate().map(|(i, &y)| emissions.get(i, y)).sum();
    s += tags.windows(2).map(|w| transitions.get(w[0], w[1])).sum::<Real>();
    Ok(s)
}

/// Forward algorithm in log space.
pub fn crf_log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<Real> {
    check_shapes(emissions.dims(), transitions.dims(), None)?;
    let (len, k) = emissions.dims();
    let mut alpha = emissions.row_slice(0).to_vec();
    let mut scratch = vec![0.0; k];
    for i in 1..len {
        let next: Vec<Real> = (0..k)
            .map(|y| {
                for (j, s) in scratch.iter_mut().enumerate() {
                    *s = alpha[j] + transitions.get(j, y);
                }
                logsumexp(&scratch) + emissions.get(i, y)
            })
            .collect();
        alpha = next;
    }
    Ok(logsumexp(&alpha))
}

/// Best tag sequence and its path score. Ties go to the lower tag id.
pub fn crf_viterbi(emissions: &Tensor, transitions: &Tensor) -> Result<(Vec<usize>, Real)> {
    check_shapes(emissions.dims(), transitions.dims(), None)?;
    let (len, k) = emissions.dims();
    let mut best = emissions.row_slice(0).to_vec();
    let mut back = vec![vec![0usize; k]; len];
    for i in 1..len {
        let mut next = vec![0.0; k];
        for y in 0..k {
            let mut arg = 0;
            let mut top = best[0] + transitions.get(0, y);
            for j in 1..k {
                let s = best[j] + transitions.get(j, y);
                if s > top {
                    top = s;
                    arg = j;
                }
            }
            next[y] = top + emissions.get(i, y);
            back[i][y] = arg;
        }
        best = next;
    }
    let mut last = 0;
    for y in 1..k {
        if best[y] > best[last] {
            last = y;
        }
    }
    let score = best[last];
    let mut path = vec![last; len];
    for i in (1..len).rev() {
        path[i - 1] = back[i][path[i]];
    }
    Ok((path, score))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub dropout: Real,
    pub max_len: usize,
    pub init_seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            d_model: 128,
            heads: 4,
            ff_dim: 256,
            layers: 2,
            mlp_hidden: 128,
            dropout: 0.1,
            max_len: 128,
            init_seed: 0,
        }
    }
}

/// Self-attention encoder over the content tokens plus a final slot, a
/// one-layer MLP producing per-slot emissions, and a CRF.
#[derive(Clone, Debug)]
pub struct CrfTagger {
    pub config: TaggerConfig,
    vocab: Vocab,
    phrases: PhraseVocabulary,
    params: ParamStore,
    emb: ParamId,
    pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    mlp: Linear,
    emit: Linear,
    transitions: ParamId,
}

impl CrfTagger {
    pub fn new(config: TaggerConfig, vocab: Vocab, phrases: PhraseVocabulary) -> Result<Self> {
        let c = &config;
        if [c.d_model, c.heads, c.ff_dim, c.layers, c.mlp_hidden, c.max_len].contains(&0)
            || !c.d_model.is_multiple_of(c.heads)
        {
            return Err(Error::InvalidArgument("invalid tagger sizes".into()));
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", c.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.init_seed);
        let mut params = ParamStore::new();
        let d = c.d_model;
        let n_tags = 2 * (phrases.len() + 1);
        let emb = params.add_uniform("emb", &[vocab.len(), d], 0.1, &mut rng)?;
        let pos = params.add_uniform("pos", &[c.max_len, d], 0.1, &mut rng)?;
        let encoder = (0..c.layers)
            .map(|l| EncoderLayer::new(&mut params, &format!("enc{l}"), d, c.heads, c.ff_dim, &mut rng))
            .collect::<GResult<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(&mut params, "enc_norm", d)?;
        let mlp = Linear::new(&mut params, "mlp", d, c.mlp_hidden, &mut rng)?;
        let emit = Linear::new(&mut params, "emit", c.mlp_hidden, n_tags, &mut rng)?;
        let transitions = params.add_zeros("transitions", &[n_tags, n_tags])?;
        Ok(CrfTagger { config, vocab, phrases, params, emb, pos, encoder, enc_norm, mlp, emit, transitions })
    }

    pub fn n_tags(&self) -> usize {
        2 * (self.phrases.len() + 1)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn phrases(&self) -> &PhraseVocabulary {
        &self.phrases
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tag_id(&self, tag: &EditTag) -> Result<usize> {
        let slot = match &tag.insert_before {
            None => 0,
            Some(p) => {
                let id = self.phrases.id(p).ok_or_else(|| {
                    Error::InvalidArgument(format!("phrase {:?} not in the phrase vocabulary", p.join(" ")))
                })?;
                id + 1
            }
        };
        let action = match tag.action {
            EditAction::Keep => 0,
            EditAction::Delete => 1,
        };
        Ok(action * (self.phrases.len() + 1) + slot)
    }

    pub fn tag(&self, id: usize) -> EditTag {
        let width = self.phrases.len() + 1;
        let action = if id / width == 0 { EditAction::Keep } else { EditAction::Delete };
        let slot = id % width;
        let phrase = (slot > 0).then(|| self.phrases.phrase(slot - 1).to_vec());
        EditTag::new(action, phrase)
    }

    pub fn tag_ids(&self, tags: &TagSequence) -> Result<Vec<usize>> {
        tags.tags.iter().map(|t| self.tag_id(t)).collect()
    }

    fn check_len(&self, content_len: usize) -> Result<()> {
        if content_len + 1 > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "{content_len} tokens exceed tagger max_len {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Emission scores, one row per content token plus the final slot.
    pub(crate) fn emissions_graph<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        content: &[S],
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_len(content.len())?;
        let ids: Vec<usize> =
            content.iter().map(|t| self.vocab.id_or_unk(t.as_ref())).chain(std::iter::once(END_ID)).collect();
        let rate = self.config.dropout;
        let emb = g.param(self.emb);
        let pos = g.param(self.pos);
        let tokens = g.gather_rows(emb, &ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather_rows(pos, &positions)?;
        let mut x = g.add(tokens, p)?;
        x = maybe_dropout(g, x, rate, dropout);
        for layer in &self.encoder {
            x = layer.forward(g, x, rate, dropout)?;
        }
        let x = self.enc_norm.forward(g, x)?;
        let h = self.mlp.forward(g, x)?;
        let h = g.relu(h);
        let h = maybe_dropout(g, h, rate, dropout);
        Ok(self.emit.forward(g, h)?)
    }

    /// Log-likelihood of gold tags for `content` on `g`.
    pub fn loglik_graph<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        content: &[S],
        gold: &TagSequence,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let ids = self.tag_ids(gold)?;
        let mut dropout = dropout;
        let e = self.emissions_graph(g, content, &mut dropout)?;
        let t = g.param(self.transitions);
        crf_loglik(g, e, t, &ids)
    }

    /// Emissions in evaluation mode with DELETE tags blocked in the final
    /// slot, which has no token to delete.
    pub fn emissions<S: AsRef<str>>(&self, content: &[S]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let e = self.emissions_graph(&mut g, content, &mut None)?;
        let mut e = g.value(e).clone();
        let last = content.len();
        let width = self.phrases.len() + 1;
        for id in width..self.n_tags() {
            e.set(last, id, BLOCKED);
        }
        Ok(e)
    }

    pub fn predict<S: AsRef<str>>(&self, content: &[S]) -> Result<TagSequence> {
        let e = self.emissions(content)?;
        let (path, _) = crf_viterbi(&e, self.params.value(self.transitions))?;
        Ok(TagSequence { tags: path.into_iter().map(|id| self.tag(id)).collect() })
    }

    /// Viterbi tags realized against the content.
    pub fn rephrase<S: AsRef<str>>(&self, content: &[S]) -> Result<Vec<String>> {
        let tags = self.predict(content)?;
        realize(content, &tags)
    }

    pub fn config_json(&self) -> String {
        serde_json::json!({
            "arch": "tagger",
            "config": self.config,
            "vocab_size": self.vocab.len(),
            "vocab": self.vocab.fingerprint(),
            "phrases": numcore::checkpoint::config_hash(&self.phrases.to_file_string()),
        })
        .to_string()
    }
}
