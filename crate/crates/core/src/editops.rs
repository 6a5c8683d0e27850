//! Alignment between a source and a target token sequence and the
//! Keep/Delete + inserted-phrase edit representation built on top of it.
//!
//! A [`TagSequence`] has one slot per source token plus a final slot. Slot
//! `i` emits its optional phrase and then, if the action is `Keep`, source
//! token `i`. The final slot only emits its phrase, so `Delete` is not
//! allowed there.
//!
//! ```
//! use rephrase::editops::{realize, to_tags, Tagged};
//!
//! let src = ["when", "dinner", "is"];
//! let tgt = ["when", "is", "dinner"];
//! let Tagged::Covered(tags) = to_tags(&src, &tgt, None) else { unreachable!() };
//! assert_eq!(tags.to_string(), "KEEP KEEP+[is] DELETE KEEP");
//! assert_eq!(realize(&src, &tags).unwrap(), tgt);
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    /// `(source index, target index)`, strictly increasing in both.
    pub kept: Vec<(usize, usize)>,
    pub deleted: Vec<usize>,
    pub added: Vec<usize>,
}

impl Alignment {
    pub fn keep(&self) -> usize {
        self.kept.len()
    }

    pub fn delete(&self) -> usize {
        self.deleted.len()
    }

    pub fn add(&self) -> usize {
        self.added.len()
    }
}

/// Longest-common-subsequence alignment. Among all longest common
/// subsequences the one with the lexicographically smallest source indices
/// is kept, and each kept source token pairs with the earliest target
/// position that still allows a longest match.
pub fn align<A: AsRef<str>, B: AsRef<str>>(source: &[A], target: &[B]) -> Alignment {
    let (n, m) = (source.len(), target.len());
    // lcs[i][j] = LCS length of source[i..] and target[j..]
    let w = m + 1;
    let mut lcs = vec![0u32; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i * w + j] = if source[i].as_ref() == target[j].as_ref() {
                1 + lcs[(i + 1) * w + j + 1]
            } else {
                lcs[(i + 1) * w + j].max(lcs[i * w + j + 1])
            };
        }
    }
    let mut kept = Vec::with_capacity(lcs[0] as usize);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m && lcs[i * w + j] > 0 {
        let want = lcs[i * w + j];
        let hit = (j..m).find(|&jj| source[i].as_ref() == target[jj].as_ref() && 1 + lcs[(i + 1) * w + jj + 1] == want);
        if let Some(jj) = hit {
            kept.push((i, jj));
            j = jj + 1;
        }
        i += 1;
    }
    let mut src_used = vec![false; n];
    let mut tgt_used = vec![false; m];
    for &(s, t) in &kept {
        src_used[s] = true;
        tgt_used[t] = true;
    }
    Alignment {
        kept,
        deleted: (0..n).filter(|&s| !src_used[s]).collect(),
        added: (0..m).filter(|&t| !tgt_used[t]).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditAction {
    Keep,
    Delete,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditTag {
    pub action: EditAction,
    /// Never empty when present.
    pub insert_before: Option<Vec<String>>,
}

impl EditTag {
    pub const KEEP: EditTag = EditTag { action: EditAction::Keep, insert_before: None };
    pub const DELETE: EditTag = EditTag { action: EditAction::Delete, insert_before: None };

    pub fn new(action: EditAction, insert_before: Option<Vec<String>>) -> Self {
        EditTag { action, insert_before: insert_before.filter(|p| !p.is_empty()) }
    }
}

impl fmt::Display for EditTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            EditAction::Keep => f.write_str("KEEP")?,
            EditAction::Delete => f.write_str("DELETE")?,
        }
        if let Some(p) = &self.insert_before {
            write!(f, "+[{}]", p.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSequence {
    pub tags: Vec<EditTag>,
}

impl TagSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// All-`Keep`, no insertions: realizes to the source itself.
    pub fn identity(source_len: usize) -> Self {
        TagSequence { tags: vec![EditTag::KEEP; source_len + 1] }
    }
}

impl fmt::Display for TagSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tags.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tagged {
    Covered(TagSequence),
    /// A required phrase is missing from the vocabulary.
    NotCovered {
        phrase: Vec<String>,
    },
}

impl Tagged {
    pub fn covered(self) -> Option<TagSequence> {
        match self {
            Tagged::Covered(t) => Some(t),
            Tagged::NotCovered { .. } => None,
        }
    }
}

/// Converts a (source, target) pair into edit tags. Each contiguous run of
/// added target tokens becomes the phrase inserted before the next kept
/// source token, or in the final slot when no kept token follows.
pub fn to_tags<A: AsRef<str>, B: AsRef<str>>(source: &[A], target: &[B], vocab: Option<&PhraseVocabulary>) -> Tagged {
    let al = align(source, target);
    let n = source.len();
    let mut tags = vec![EditTag::KEEP; n + 1];
    for &s in &al.deleted {
        tags[s].action = EditAction::Delete;
    }
    let phrase =
        |from: usize, to: usize| -> Vec<String> { target[from..to].iter().map(|t| t.as_ref().to_string()).collect() };
    let mut next_tgt = 0;
    let mut runs: Vec<(usize, Vec<String>)> = Vec::new();
    for &(s, t) in &al.kept {
        if t > next_tgt {
            runs.push((s, phrase(next_tgt, t)));
        }
        next_tgt = t + 1;
    }
    if next_tgt < target.len() {
        runs.push((n, phrase(next_tgt, target.len())));
    }
    for (slot, p) in runs {
        if let Some(v) = vocab {
            if !v.contains(&p) {
                return Tagged::NotCovered { phrase: p };
            }
        }
        tags[slot].insert_before = Some(p);
    }
    Tagged::Covered(TagSequence { tags })
}

/// Applies edit tags to `source`.
pub fn realize<S: AsRef<str>>(source: &[S], tags: &TagSequence) -> Result<Vec<String>> {
    if tags.len() != source.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} tags for {} source tokens (need {})",
            tags.len(),
            source.len(),
            source.len() + 1
        )));
    }
    if tags.tags[source.len()].action == EditAction::Delete {
        return Err(Error::InvalidArgument("DELETE in the final slot".into()));
    }
    let mut out = Vec::new();
    for (i, tag) in tags.tags.iter().enumerate() {
        if let Some(p) = &tag.insert_before {
            out.extend(p.iter().cloned());
        }
        if i < source.len() && tag.action == EditAction::Keep {
            out.push(source[i].as_ref().to_string());
        }
    }
    Ok(out)
}

/// Insertion phrases ranked by descending frequency, ties broken by the
/// lexicographic order of the space-joined phrase.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PhraseVocabulary {
    entries: Vec<(Vec<String>, usize)>,
    index: HashMap<Vec<String>, usize>,
}

impl PhraseVocabulary {
    /// Builds from `(phrase, frequency)` pairs, sorting them into rank order.
    pub fn from_counts(counts: impl IntoIterator<Item = (Vec<String>, usize)>) -> Result<Self> {
        let mut entries: Vec<(Vec<String>, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.join(" ").cmp(&b.0.join(" "))));
        let mut index = HashMap::new();
        for (i, (p, _)) in entries.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::InvalidArgument("empty phrase".into()));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate phrase {:?}", p.join(" "))));
            }
        }
        Ok(PhraseVocabulary { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, phrase: &[String]) -> bool {
        self.index.contains_key(phrase)
    }

    /// Rank of `phrase`, 0 being the most frequent.
    pub fn id(&self, phrase: &[String]) -> Option<usize> {
        self.index.get(phrase).copied()
    }

    pub fn phrase(&self, id: usize) -> &[String] {
        &self.entries[id].0
    }

    pub fn frequency(&self, id: usize) -> usize {
        self.entries[id].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[String], usize)> {
        self.entries.iter().map(|(p, f)| (p.as_slice(), *f))
    }

    /// The `k` highest-ranked phrases.
    pub fn top(&self, k: usize) -> PhraseVocabulary {
        let entries: Vec<_> = self.entries.iter().take(k).cloned().collect();
        let index = entries.iter().enumerate().map(|(i, (p, _))| (p.clone(), i)).collect();
        PhraseVocabulary { entries, index }
    }

    /// One phrase per line followed by a tab and its frequency, in rank order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (p, f) in &self.entries {
            s.push_str(&p.join(" "));
            s.push('\t');
            s.push_str(&f.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (phrase, freq) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Parse { line: i + 1, message: "expected phrase<TAB>frequency".into() })?;
            let freq = freq
                .trim()
                .parse()
                .map_err(|e| Error::Parse { line: i + 1, message: format!("bad frequency: {e}") })?;
            counts.push((phrase.split_whitespace().map(String::from).collect(), freq));
        }
        Self::from_counts(counts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Collects every insertion phrase needed to tag `pairs` with no vocabulary
/// restriction.
pub fn extract_phrases<A: AsRef<str>, B: AsRef<str>>(pairs: &[(Vec<A>, Vec<B>)]) -> PhraseVocabulary {
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    for (s, t) in pairs {
        if let Tagged::Covered(tags) = to_tags(s, t, None) {
            for p in tags.tags.into_iter().filter_map(|t| t.insert_before) {
                *counts.entry(p).or_insert(0) += 1;
            }
        }
    }
    PhraseVocabulary::from_counts(counts).expect("phrases from to_tags are non-empty and unique")
}

/// Fraction of pairs expressible with `vocab`. An empty pair list counts as
/// fully covered.
pub fn coverage<A: AsRef<str>, B: AsRef<str>>(pairs: &[(Vec<A>, Vec<B>)], vocab: &PhraseVocabulary) -> f64 {
    if pairs.is_empty() {
        return 1.0;
    }
    let ok = pairs.iter().filter(|(s, t)| matches!(to_tags(s, t, Some(vocab)), Tagged::Covered(_))).count();
    ok as f64 / pairs.len() as f64
}

/// Coverage of each top-`k` prefix of `vocab`.
pub fn coverage_curve<A: AsRef<str>, B: AsRef<str>>(
    pairs: &[(Vec<A>, Vec<B>)],
    vocab: &PhraseVocabulary,
    ks: &[usize],
) -> Vec<(usize, f64)> {
    ks.iter().map(|&k| (k, coverage(pairs, &vocab.top(k)))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn pronoun_swap_alignment() {
        let al = align(&v("I can pick her up"), &v("I can pick you up"));
        assert_eq!(al.keep(), 4);
        assert_eq!(al.deleted, vec![3]);
        assert_eq!(al.added, vec![3]);
    }

    #[test]
    fn identity_and_empty_alignment() {
        let x = v("a b c");
        let al = align(&x, &x);
        assert_eq!(al.kept, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(al.deleted.is_empty() && al.added.is_empty());
        let empty: Vec<String> = vec![];
        let al = align(&empty, &x);
        assert_eq!(al.added, vec![0, 1, 2]);
    }

    #[test]
    fn ties_prefer_earliest_source() {
        // {when, dinner} and {when, is} both have length 2.
        let al = align(&v("when dinner is"), &v("when is dinner"));
        assert_eq!(al.kept, vec![(0, 0), (1, 2)]);
        // repeated token: first source copy is used
        let al = align(&v("a a"), &v("a"));
        assert_eq!(al.kept, vec![(0, 0)]);
    }

    #[test]
    fn when_is_dinner_tags() {
        let Tagged::Covered(tags) = to_tags(&v("when dinner is"), &v("when is dinner"), None) else {
            panic!("uncovered")
        };
        assert_eq!(
            tags.tags,
            vec![EditTag::KEEP, EditTag::new(EditAction::Keep, Some(v("is"))), EditTag::DELETE, EditTag::KEEP,]
        );
        assert_eq!(realize(&v("when dinner is"), &tags).unwrap(), v("when is dinner"));
    }

    #[test]
    fn identical_pair_is_all_keep() {
        let x = v("I will be on time");
        assert_eq!(to_tags(&x, &x, None), Tagged::Covered(TagSequence::identity(5)));
        assert_eq!(realize(&x, &TagSequence::identity(5)).unwrap(), x);
    }

    #[test]
    fn missing_phrase_is_not_covered() {
        let vocab = PhraseVocabulary::from_counts([(v("is"), 3)]).unwrap();
        let r = to_tags(&v("if he has my keys"), &v("do you have my keys"), Some(&vocab));
        assert!(matches!(r, Tagged::NotCovered { .. }));
    }

    #[test]
    fn final_slot_insertion() {
        let s = v("call me");
        let t = v("call me tonight please");
        let tags = to_tags(&s, &t, None).covered().unwrap();
        assert_eq!(tags.tags[2].insert_before, Some(v("tonight please")));
        assert_eq!(realize(&s, &tags).unwrap(), t);
    }

    #[test]
    fn realize_length_mismatch() {
        let r = realize(&v("a b"), &TagSequence::identity(3));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        let mut bad = TagSequence::identity(2);
        bad.tags[2].action = EditAction::Delete;
        assert!(realize(&v("a b"), &bad).is_err());
    }

    #[test]
    fn phrase_ranking() {
        let mut pairs = vec![];
        for _ in 0..3 {
            pairs.push((v("if he has my keys"), v("do you has my keys")));
        }
        pairs.push((v("when dinner is"), v("when is dinner")));
        let vocab = extract_phrases(&pairs);
        let ranked: Vec<String> = vocab.iter().map(|(p, _)| p.join(" ")).collect();
        // "do you" replaces "if he" in each of the first three pairs
        assert_eq!(ranked, ["do you", "is"]);
        assert_eq!(vocab.frequency(0), 3);
    }

    #[test]
    fn identity_pairs_have_empty_vocabulary() {
        let pairs = vec![(v("a b"), v("a b")), (v("c"), v("c"))];
        assert!(extract_phrases(&pairs).is_empty());
    }

    #[test]
    fn coverage_cases() {
        let pairs = vec![(v("a b"), v("a b")), (v("when dinner is"), v("when is dinner")), (v("x"), v("y x"))];
        let full = extract_phrases(&pairs);
        assert_eq!(coverage(&pairs, &full), 1.0);
        let empty = PhraseVocabulary::default();
        assert!((coverage(&pairs, &empty) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let vocab = PhraseVocabulary::from_counts([(v("do you"), 5), (v("is"), 2), (v("are you"), 5)]).unwrap();
        let text = vocab.to_file_string();
        assert_eq!(text, "are you\t5\ndo you\t5\nis\t2\n");
        assert_eq!(PhraseVocabulary::parse(&text).unwrap(), vocab);
        assert!(PhraseVocabulary::parse("no tab here").is_err());
    }
}
