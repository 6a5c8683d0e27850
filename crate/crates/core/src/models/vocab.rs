use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const START: &str = "<s>";
pub const END: &str = "</s>";
pub const MASK: &str = "<mask>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const UNK_ID: usize = 4;

const SPECIALS: [&str; 5] = [PAD, START, END, MASK, UNK];

/// Token types with the five special symbols first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// A source sentence under the extended vocabulary: out-of-vocabulary
/// source tokens get ids `len(vocab) + k` in first-occurrence order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSource {
    /// Input ids, `UNK_ID` for unknown tokens.
    pub ids: Vec<usize>,
    /// Extended ids.
    pub ext_ids: Vec<usize>,
    pub oovs: Vec<String>,
    pub surfaces: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: EncodedSource,
    /// Extended target ids ending with `END_ID`.
    pub target: Vec<usize>,
}

impl EncodedSource {
    /// Width of the extended vocabulary for this source.
    pub fn ext_size(&self, vocab: &Vocab) -> usize {
        vocab.len() + self.oovs.len()
    }
}

impl Vocab {
    /// Types ordered by descending count, ties by string, capped at
    /// `max_size` non-special types; types rarer than `min_count` dropped.
    pub fn build<'a, I, S>(sentences: I, max_size: usize, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_ref()).or_insert(0) += 1;
            }
        }
        let mut types: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(t, c)| c >= min_count && !SPECIALS.contains(&t)).collect();
        types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        types.truncate(max_size);
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(types.into_iter().map(|(t, _)| t.to_string())))
            .expect("specials first, no duplicates")
    }

    /// Rebuilds from a full token list, specials included.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument("vocabulary must start with the special symbols".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_source<S: AsRef<str>>(&self, source: &[S]) -> EncodedSource {
        let mut oovs: Vec<String> = Vec::new();
        let mut ids = Vec::with_capacity(source.len());
        let mut ext_ids = Vec::with_capacity(source.len());
        for t in source {
            let t = t.as_ref();
            match self.id(t) {
                Some(id) => {
                    ids.push(id);
                    ext_ids.push(id);
                }
                None => {
                    let k = oovs.iter().position(|o| o == t).unwrap_or_else(|| {
                        oovs.push(t.to_string());
                        oovs.len() - 1
                    });
                    ids.push(UNK_ID);
                    ext_ids.push(self.len() + k);
                }
            }
        }
        EncodedSource { ids, ext_ids, oovs, surfaces: source.iter().map(|s| s.as_ref().to_string()).collect() }
    }

    /// Target tokens map to vocabulary ids, then to source copies, then to
    /// `UNK_ID`; `END_ID` is appended.
    pub fn encode_pair<A: AsRef<str>, B: AsRef<str>>(&self, source: &[A], target: &[B]) -> EncodedPair {
        let source = self.encode_source(source);
        let mut tgt: Vec<usize> = target
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.id(t).or_else(|| source.oovs.iter().position(|o| o == t).map(|k| self.len() + k)).unwrap_or(UNK_ID)
            })
            .collect();
        tgt.push(END_ID);
        EncodedPair { source, target: tgt }
    }

    /// Surface of an extended id.
    pub fn ext_token<'a>(&'a self, id: usize, source: &'a EncodedSource) -> &'a str {
        if id < self.len() {
            &self.tokens[id]
        } else {
            &source.oovs[id - self.len()]
        }
    }

    /// Extended id to input id (copies of unknown tokens feed back as `UNK_ID`).
    pub fn input_id(&self, ext_id: usize) -> usize {
        if ext_id < self.len() {
            ext_id
        } else {
            UNK_ID
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tokens(fs::read_to_string(path)?.lines().map(String::from))
    }

    /// Hex digest of the token list, stored in model configs.
    pub fn fingerprint(&self) -> String {
        numcore::checkpoint::config_hash(&self.to_file_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn build_orders_by_count() {
        let sents = [v("a b b c c c"), v("c")];
        let vocab = Vocab::build(sents.iter().map(|s| s.as_slice()), 2, 1);
        assert_eq!(&vocab.tokens()[5..], ["c", "b"]);
        let vocab = Vocab::build(sents.iter().map(|s| s.as_slice()), 10, 2);
        assert_eq!(vocab.len(), 7);
    }

    #[test]
    fn extended_ids_for_unknown_source_tokens() {
        let vocab = Vocab::build([v("tell is coming").as_slice()], 100, 1);
        let pair = vocab.encode_pair(&v("tell Zorvek Zorvek is coming"), &v("is Zorvek coming Quax"));
        let n = vocab.len();
        assert_eq!(pair.source.oovs, ["Zorvek"]);
        assert_eq!(pair.source.ids[1], UNK_ID);
        assert_eq!(pair.source.ext_ids[1], n);
        assert_eq!(pair.source.ext_ids[2], n);
        assert_eq!(pair.target[1], n);
        assert_eq!(pair.target[3], UNK_ID);
        assert_eq!(*pair.target.last().unwrap(), END_ID);
        assert_eq!(vocab.ext_token(n, &pair.source), "Zorvek");
        assert_eq!(vocab.input_id(n), UNK_ID);
    }

    #[test]
    fn file_round_trip() {
        let vocab = Vocab::build([v("x y z").as_slice()], 100, 1);
        let back = Vocab::from_tokens(vocab.to_file_string().lines().map(String::from)).unwrap();
        assert_eq!(back, vocab);
        assert!(Vocab::from_tokens(v("a b")).is_err());
    }
}
