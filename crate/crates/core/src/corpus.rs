//! Utterances, datasets, loaders, the train/test/valid split, corpus
//! statistics and the synthetic grammar used for desk-scale experiments.
//!
//! A query carries its message content as a token span. In raw text the span
//! is written with bracket markup:
//!
//! ```
//! use rephrase::corpus::parse_marked_query;
//!
//! let (tokens, span) = parse_marked_query("Let Kira know [ I can pick her up ]").unwrap();
//! let content: Vec<&str> = tokens[span.0..span.1].iter().map(|t| t.as_str()).collect();
//! assert_eq!(content, ["I", "can", "pick", "her", "up"]);
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editops::align;
use crate::error::{Error, Result};
use crate::text::{detokenize, normalize_surfaces, tokenize, tokenize_surfaces, NormalizationPolicy, Token};

/// Markers placed around the content span in model inputs.
pub const SPAN_OPEN: &str = "[";
pub const SPAN_CLOSE: &str = "]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RephraseClass {
    #[serde(alias = "exact")]
    Exact,
    #[serde(alias = "rephrase")]
    Rephrase,
}

impl fmt::Display for RephraseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RephraseClass::Exact => "EXACT",
            RephraseClass::Rephrase => "REPHRASE",
        })
    }
}

impl std::str::FromStr for RephraseClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EXACT" => Ok(RephraseClass::Exact),
            "REPHRASE" => Ok(RephraseClass::Rephrase),
            other => Err(Error::InvalidArgument(format!("unknown class {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub query_tokens: Vec<Token>,
    /// `[start, end)` into `query_tokens`.
    pub content_span: (usize, usize),
    pub class: RephraseClass,
    /// Reference rephrases as token surfaces, top annotation first.
    pub rephrases: Vec<Vec<String>>,
}

impl Utterance {
    /// Checks the span and class invariants.
    pub fn validate(&self) -> Result<()> {
        let (s, e) = self.content_span;
        if !(s < e && e <= self.query_tokens.len()) {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: format!("content span [{s}, {e}) outside query of {} tokens", self.query_tokens.len()),
            });
        }
        if self.class == RephraseClass::Rephrase && self.rephrases.is_empty() {
            return Err(Error::InvalidUtterance(self.id.clone()));
        }
        Ok(())
    }

    pub fn content(&self) -> &[Token] {
        &self.query_tokens[self.content_span.0..self.content_span.1]
    }

    pub fn content_surfaces(&self) -> Vec<String> {
        self.content().iter().map(|t| t.surface.clone()).collect()
    }

    /// The gold output: the content for EXACT, the top rephrase otherwise.
    pub fn reference(&self) -> Result<Vec<String>> {
        match self.class {
            RephraseClass::Exact => Ok(self.content_surfaces()),
            RephraseClass::Rephrase => {
                self.rephrases.first().cloned().ok_or_else(|| Error::InvalidUtterance(self.id.clone()))
            }
        }
    }

    /// Every acceptable output: for EXACT the content followed by any
    /// provided rephrases.
    pub fn all_references(&self) -> Result<Vec<Vec<String>>> {
        match self.class {
            RephraseClass::Exact => {
                let mut refs = vec![self.content_surfaces()];
                refs.extend(self.rephrases.iter().cloned());
                Ok(refs)
            }
            RephraseClass::Rephrase => {
                if self.rephrases.is_empty() {
                    Err(Error::InvalidUtterance(self.id.clone()))
                } else {
                    Ok(self.rephrases.clone())
                }
            }
        }
    }

    /// Model input: the full query with the content span wrapped in
    /// [`SPAN_OPEN`] / [`SPAN_CLOSE`].
    pub fn model_source(&self) -> Vec<String> {
        let (s, e) = self.content_span;
        let mut out = Vec::with_capacity(self.query_tokens.len() + 2);
        for (i, t) in self.query_tokens.iter().enumerate() {
            if i == s {
                out.push(SPAN_OPEN.to_string());
            }
            out.push(t.surface.clone());
            if i + 1 == e {
                out.push(SPAN_CLOSE.to_string());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Valid,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub split_tag: Option<SplitTag>,
}

impl Dataset {
    /// Validates every utterance and id uniqueness.
    pub fn new(utterances: Vec<Utterance>, split_tag: Option<SplitTag>) -> Result<Self> {
        let mut seen = HashSet::new();
        for u in &utterances {
            u.validate()?;
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Validation { id: u.id.clone(), message: "duplicate id".into() });
            }
        }
        Ok(Dataset { utterances, split_tag })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Utterance> {
        self.utterances.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// `(model source, gold target)` pairs.
    pub fn source_target_pairs(&self) -> Result<Vec<(Vec<String>, Vec<String>)>> {
        self.utterances.iter().map(|u| Ok((u.model_source(), u.reference()?))).collect()
    }

    /// `(content, gold target)` pairs, the input of the edit tagger.
    pub fn content_target_pairs(&self) -> Result<Vec<(Vec<String>, Vec<String>)>> {
        self.utterances.iter().map(|u| Ok((u.content_surfaces(), u.reference()?))).collect()
    }

    /// Serializes in the line-delimited record format read by
    /// [`load_dataset`].
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for u in &self.utterances {
            let rec = Record {
                id: u.id.clone(),
                query: detokenize(&u.query_tokens),
                span_start: Some(u.content_span.0),
                span_end: Some(u.content_span.1),
                class: u.class,
                rephrases: u.rephrases.iter().map(|r| detokenize(r)).collect(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span_end: Option<usize>,
    class: RephraseClass,
    #[serde(default)]
    rephrases: Vec<String>,
}

/// Column layout of a tab-separated dataset file (0-based indices).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsvColumns {
    /// Line number is used as the id when absent.
    pub id: Option<usize>,
    pub query: usize,
    pub class: usize,
    pub rephrases: Vec<usize>,
    pub span_start: Option<usize>,
    pub span_end: Option<usize>,
    pub has_header: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    Tsv(TsvColumns),
}

/// Tokenizes a query that may contain `[ ... ]` content markup. Returns the
/// tokens without the markers and the marked span, if any.
pub fn parse_marked_query(raw: &str) -> Result<(Vec<Token>, (usize, usize))> {
    let (tokens, span) = split_markup(raw)?;
    let span = span.ok_or_else(|| Error::InvalidArgument(format!("no [ ... ] content markup in {raw:?}")))?;
    Ok((tokens, span))
}

fn split_markup(raw: &str) -> Result<(Vec<Token>, Option<(usize, usize)>)> {
    if !raw.contains(SPAN_OPEN) && !raw.contains(SPAN_CLOSE) {
        return Ok((tokenize(raw), None));
    }
    let spaced = raw.replace(SPAN_OPEN, " [ ").replace(SPAN_CLOSE, " ] ");
    let marked = tokenize(&spaced);
    let positions =
        |m: &str| -> Vec<usize> { marked.iter().enumerate().filter(|(_, t)| t.surface == m).map(|(i, _)| i).collect() };
    let (open, close) = (positions(SPAN_OPEN), positions(SPAN_CLOSE));
    if open.len() != 1 || close.len() != 1 || close[0] <= open[0] + 1 {
        return Err(Error::InvalidArgument(format!("malformed content markup in {raw:?}")));
    }
    let (o, c) = (open[0], close[0]);
    // re-tokenize without markers so proper-noun guesses ignore them
    let words: Vec<&str> =
        marked.iter().enumerate().filter(|&(i, _)| i != o && i != c).map(|(_, t)| t.as_str()).collect();
    let tokens = tokenize(&words.join(" "));
    debug_assert_eq!(tokens.len(), words.len());
    Ok((tokens, Some((o, c - 1))))
}

fn build_utterance(
    id: String,
    query: &str,
    span: (Option<usize>, Option<usize>),
    class: RephraseClass,
    rephrases: &[String],
) -> Result<Utterance> {
    let (tokens, marked) =
        split_markup(query).map_err(|e| Error::Validation { id: id.clone(), message: e.to_string() })?;
    let content_span = match (marked, span) {
        (Some(s), _) => s,
        (None, (Some(s), Some(e))) => (s, e),
        (None, _) => {
            return Err(Error::Validation { id, message: "neither span fields nor [ ... ] markup".into() });
        }
    };
    let u = Utterance {
        id,
        query_tokens: tokens,
        content_span,
        class,
        rephrases: rephrases.iter().filter(|r| !r.trim().is_empty()).map(|r| tokenize_surfaces(r)).collect(),
    };
    u.validate()?;
    Ok(u)
}

pub fn parse_jsonl(text: &str) -> Result<Dataset> {
    let mut utterances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        utterances.push(build_utterance(
            rec.id,
            &rec.query,
            (rec.span_start, rec.span_end),
            rec.class,
            &rec.rephrases,
        )?);
    }
    Dataset::new(utterances, None)
}

pub fn parse_tsv(text: &str, cols: &TsvColumns) -> Result<Dataset> {
    let mut utterances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if (cols.has_header && i == 0) || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let field = |c: usize| -> Result<&str> {
            fields.get(c).copied().ok_or_else(|| Error::Parse { line: i + 1, message: format!("missing column {c}") })
        };
        let index = |c: Option<usize>| -> Result<Option<usize>> {
            match c {
                None => Ok(None),
                Some(c) => field(c)?
                    .trim()
                    .parse()
                    .map(Some)
                    .map_err(|e| Error::Parse { line: i + 1, message: format!("column {c}: {e}") }),
            }
        };
        let id = match cols.id {
            Some(c) => field(c)?.trim().to_string(),
            None => format!("line{}", i + 1),
        };
        let class =
            field(cols.class)?.parse().map_err(|e: Error| Error::Parse { line: i + 1, message: e.to_string() })?;
        let rephrases = cols.rephrases.iter().filter_map(|&c| fields.get(c).map(|s| s.to_string())).collect::<Vec<_>>();
        let span = (index(cols.span_start)?, index(cols.span_end)?);
        utterances.push(build_utterance(id, field(cols.query)?, span, class, &rephrases)?);
    }
    Dataset::new(utterances, None)
}

pub fn load_dataset(path: &Path, format: &DatasetFormat) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    match format {
        DatasetFormat::Jsonl => parse_jsonl(&text),
        DatasetFormat::Tsv(cols) => parse_tsv(&text, cols),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub valid: Dataset,
}

/// Seeded shuffle, then `round(n * train)` / `round(n * test)` / rest.
/// Each part keeps the original relative order.
pub fn split(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * a).round() as usize;
    let n_test = (((n as f64) * b).round() as usize).min(n - n_train);
    let part = |idx: &[usize], tag: SplitTag| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Dataset { utterances: idx.iter().map(|&i| dataset.utterances[i].clone()).collect(), split_tag: Some(tag) }
    };
    Ok(Splits {
        train: part(&order[..n_train], SplitTag::Train),
        test: part(&order[n_train..n_train + n_test], SplitTag::Test),
        valid: part(&order[n_train + n_test..], SplitTag::Valid),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChangeCategory {
    None,
    Pronoun,
    Question,
    PronounAndQuestion,
}

impl ChangeCategory {
    pub const ALL: [ChangeCategory; 4] =
        [ChangeCategory::None, ChangeCategory::Pronoun, ChangeCategory::Question, ChangeCategory::PronounAndQuestion];
}

impl fmt::Display for ChangeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChangeCategory::None => "NONE",
            ChangeCategory::Pronoun => "PRONOUN",
            ChangeCategory::Question => "QUESTION",
            ChangeCategory::PronounAndQuestion => "PRONOUN_AND_QUESTION",
        })
    }
}

/// `(deleted, added)` pronoun pairs that count as a perspective change.
const PRONOUN_SWAPS: &[(&str, &str)] = &[
    ("i", "you"),
    ("you", "i"),
    ("me", "you"),
    ("you", "me"),
    ("my", "your"),
    ("your", "my"),
    ("mine", "yours"),
    ("yours", "mine"),
    ("myself", "yourself"),
    ("yourself", "myself"),
    ("i'm", "you're"),
    ("i'll", "you'll"),
    ("he", "you"),
    ("she", "you"),
    ("they", "you"),
    ("him", "you"),
    ("her", "you"),
    ("them", "you"),
    ("his", "your"),
    ("her", "your"),
    ("their", "your"),
    ("his", "yours"),
    ("hers", "yours"),
    ("theirs", "yours"),
    ("himself", "yourself"),
    ("herself", "yourself"),
    ("he's", "you're"),
    ("she's", "you're"),
    ("he'll", "you'll"),
    ("she'll", "you'll"),
];

const AUXILIARIES: &[&str] = &[
    "do", "does", "did", "can", "could", "will", "would", "should", "shall", "may", "might", "must", "is", "are", "am",
    "was", "were",
];
const WH_WORDS: &[&str] = &["what", "when", "where", "who", "whom", "whose", "why", "how", "which"];
const WH_PHRASES: &[(&str, &str)] =
    &[("what", "time"), ("how", "long"), ("how", "much"), ("how", "many"), ("what", "day")];

fn is_aux(s: &str) -> bool {
    AUXILIARIES.contains(&s)
}

/// Ends with `?`, starts with an auxiliary, or starts with a wh-word (or a
/// two-word wh phrase such as "what time") directly followed by an
/// auxiliary. Expects lowercased tokens.
pub fn is_question_formed<S: AsRef<str>>(tokens: &[S]) -> bool {
    let t: Vec<&str> = tokens.iter().map(|s| s.as_ref()).collect();
    if t.last() == Some(&"?") {
        return true;
    }
    match t.as_slice() {
        [first, ..] if is_aux(first) => true,
        [a, b, c, ..] if WH_PHRASES.contains(&(*a, *b)) && is_aux(c) => true,
        [w, a, ..] => WH_WORDS.contains(w) && is_aux(a),
        _ => false,
    }
}

/// Heuristic change category between a content span and its rephrase.
pub fn classify_change<A: AsRef<str>, B: AsRef<str>>(content: &[A], reference: &[B]) -> ChangeCategory {
    let lower = NormalizationPolicy { lowercase: true, strip_terminal_punct: false };
    let c = normalize_surfaces(content, lower);
    let r = normalize_surfaces(reference, lower);
    let question = is_question_formed(&r) && !is_question_formed(&c);
    let strip = NormalizationPolicy::default();
    let (cs, rs) = (normalize_surfaces(&c, strip), normalize_surfaces(&r, strip));
    let al = align(&cs, &rs);
    let pronoun =
        al.deleted.iter().any(|&d| al.added.iter().any(|&a| PRONOUN_SWAPS.contains(&(cs[d].as_str(), rs[a].as_str()))));
    match (pronoun, question) {
        (false, false) => ChangeCategory::None,
        (true, false) => ChangeCategory::Pronoun,
        (false, true) => ChangeCategory::Question,
        (true, true) => ChangeCategory::PronounAndQuestion,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_utterances: usize,
    pub n_rephrase: usize,
    pub avg_source_len: f64,
    pub avg_target_len: f64,
    pub avg_keep: f64,
    pub avg_add: f64,
    pub avg_delete: f64,
    pub class_freq: BTreeMap<ChangeCategory, f64>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "utterances      {}", self.n_utterances)?;
        writeln!(f, "rephrase        {}", self.n_rephrase)?;
        writeln!(f, "avg_source_len  {:.2}", self.avg_source_len)?;
        writeln!(f, "avg_target_len  {:.2}", self.avg_target_len)?;
        writeln!(f, "avg_keep        {:.2}", self.avg_keep)?;
        writeln!(f, "avg_add         {:.2}", self.avg_add)?;
        writeln!(f, "avg_delete      {:.2}", self.avg_delete)?;
        for (c, p) in &self.class_freq {
            writeln!(f, "{:<22}{:.1}%", c.to_string(), 100.0 * p)?;
        }
        Ok(())
    }
}

/// Lengths and alignment counts over REPHRASE utterances (content vs top
/// rephrase, both under the default metric normalization) and the change
/// category distribution over every utterance, EXACT counting as `None`.
pub fn compute_stats(dataset: &Dataset) -> Result<CorpusStats> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let policy = NormalizationPolicy::default();
    let (mut src, mut tgt, mut keep, mut add, mut del) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut n_rephrase = 0;
    let mut counts: BTreeMap<ChangeCategory, usize> = ChangeCategory::ALL.iter().map(|&c| (c, 0)).collect();
    for u in &dataset.utterances {
        let cat = match u.class {
            RephraseClass::Exact => ChangeCategory::None,
            RephraseClass::Rephrase => {
                let r = u.reference()?;
                let content = u.content_surfaces();
                let cn = normalize_surfaces(&content, policy);
                let rn = normalize_surfaces(&r, policy);
                let al = align(&cn, &rn);
                n_rephrase += 1;
                src += cn.len();
                tgt += rn.len();
                keep += al.keep();
                add += al.add();
                del += al.delete();
                classify_change(&content, &r)
            }
        };
        *counts.get_mut(&cat).expect("all categories present") += 1;
    }
    let avg = |x: usize| if n_rephrase == 0 { 0.0 } else { x as f64 / n_rephrase as f64 };
    let n = dataset.len() as f64;
    Ok(CorpusStats {
        n_utterances: dataset.len(),
        n_rephrase,
        avg_source_len: avg(src),
        avg_target_len: avg(tgt),
        avg_keep: avg(keep),
        avg_add: avg(add),
        avg_delete: avg(del),
        class_freq: counts.into_iter().map(|(c, k)| (c, k as f64 / n)).collect(),
    })
}

const NAMES: &[&str] = &[
    "Brad", "Kira", "Jo", "Sam", "Alex", "Maria", "John", "Emma", "Liam", "Olivia", "Noah", "Ava", "Mia", "Lucas",
    "Zoe", "Ethan", "Chloe", "Ryan", "Lily", "Owen", "Grace", "Jack", "Ella", "Leo", "Nina", "Omar", "Priya", "Tom",
    "Sara", "Ben",
];
const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th", "dr", "kr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "l", "k", "s", "m"];

const TIMES: &[&str] =
    &["tonight", "today", "tomorrow", "at five", "after work", "on Friday", "on Sunday", "this evening", "at noon"];
const NOUNS: &[&str] = &[
    "laptop", "keys", "phone", "jacket", "car", "passport", "badge", "wallet", "charger", "umbrella", "bike",
    "homework",
];
const CHORE_VERBS: &[&str] = &["bring", "charge", "return", "pack", "find", "clean", "check", "fix", "grab", "wash"];
const EVENTS: &[&str] =
    &["dinner", "the meeting", "the game", "the party", "practice", "the flight", "the movie", "lunch"];
const STATES: &[&str] = &["coming", "leaving", "free", "ready", "home", "awake", "around", "driving"];
const RELATIVES: &[&str] = &["mom", "dad", "sister", "brother", "boss", "doctor", "coach", "aunt"];

/// `(base, past, fitting tail)`
const MEET_VERBS: &[(&str, &str, &str)] = &[
    ("pick", "picked", "up"),
    ("call", "called", "later"),
    ("meet", "met", "for lunch"),
    ("drive", "drove", "home"),
    ("help", "helped", "with the move"),
    ("text", "texted", "soon"),
    ("visit", "visited", "next week"),
    ("see", "saw", "at the station"),
];
const NEED_VERBS: &[(&str, &str)] = &[("needs", "need"), ("has", "have"), ("wants", "want"), ("forgot", "forgot")];

struct Gen {
    rng: ChaCha8Rng,
    known: HashSet<&'static str>,
}

#[derive(Clone, Copy)]
struct Person {
    subj: &'static str,
    obj: &'static str,
    poss: &'static str,
}

const HE: Person = Person { subj: "he", obj: "him", poss: "his" };
const SHE: Person = Person { subj: "she", obj: "her", poss: "her" };

impl Gen {
    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        xs[self.rng.gen_range(0..xs.len())]
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    fn person(&mut self) -> Person {
        if self.chance(0.5) {
            HE
        } else {
            SHE
        }
    }

    /// In-list name or, 40% of the time, a made-up one.
    fn name(&mut self) -> String {
        if self.chance(0.4) {
            loop {
                let syllables = self.rng.gen_range(2..=3);
                let mut s = String::new();
                for _ in 0..syllables {
                    s.push_str(self.pick(ONSETS));
                    s.push_str(self.pick(VOWELS));
                }
                s.push_str(self.pick(CODAS));
                let mut c = s.chars();
                let first = c.next().expect("non-empty").to_ascii_uppercase();
                let name: String = std::iter::once(first).chain(c).collect();
                if !self.known.contains(name.as_str()) {
                    return name;
                }
            }
        }
        self.pick(NAMES).to_string()
    }
}

/// One generated example: carrier words before the content, the content,
/// the gold rephrases (empty for EXACT).
struct Sample {
    before: String,
    content: String,
    rephrases: Vec<String>,
}

fn statement_carrier(g: &mut Gen, recipient: &str) -> String {
    match g.rng.gen_range(0..5) {
        0 => format!("tell {recipient} that"),
        1 => format!("tell {recipient}"),
        2 => format!("let {recipient} know"),
        3 => format!("message {recipient} and say"),
        _ => format!("text {recipient}"),
    }
}

fn question_carrier(g: &mut Gen, recipient: &str) -> String {
    match g.rng.gen_range(0..3) {
        0 => format!("ask {recipient}"),
        1 => format!("message {recipient} and ask"),
        _ => format!("text {recipient} and ask"),
    }
}

fn sample(g: &mut Gen) -> Sample {
    let recipient = g.name();
    let p = g.person();
    let other = g.name();
    let time = g.pick(TIMES);
    let noun = g.pick(NOUNS);
    let (vb, vpast, tail) = g.pick(MEET_VERBS);
    let family = g.rng.gen_range(0..28);
    let stmt = |g: &mut Gen, content: String, reph: Vec<String>| Sample {
        before: statement_carrier(g, &recipient),
        content,
        rephrases: reph,
    };
    let ask = |g: &mut Gen, content: String, reph: Vec<String>| Sample {
        before: question_carrier(g, &recipient),
        content,
        rephrases: reph,
    };
    match family {
        // pronoun flip of the recipient as object
        0 | 1 => {
            let aux = g.pick(&["will", "can", "could", "should"]);
            let reph = format!("I {aux} {vb} you {tail}");
            let mut refs = vec![reph];
            if aux == "will" && g.chance(0.3) {
                refs.push(format!("I'll {vb} you {tail}"));
            }
            stmt(g, format!("I {aux} {vb} {} {tail}", p.obj), refs)
        }
        // recipient as subject, verb agreement and possessive
        2 | 3 => {
            let (v3n, vbn) = g.pick(NEED_VERBS);
            let chore = g.pick(CHORE_VERBS);
            stmt(
                g,
                format!("{} {v3n} to {chore} {} {noun}", p.subj, p.poss),
                vec![format!("you {vbn} to {chore} your {noun}")],
            )
        }
        // third party looking for the recipient
        4 => {
            let is = g.pick(&["is", "was"]);
            stmt(g, format!("{other} {is} looking for {}", p.obj), vec![format!("{other} {is} looking for you")])
        }
        5 => stmt(g, format!("{} should call {other} {time}", p.subj), vec![format!("you should call {other} {time}")]),
        // verbatim statements
        6 => {
            let aux = g.pick(&["will", "can", "could"]);
            stmt(g, format!("I {aux} {vb} {other} {tail}"), vec![])
        }
        7 => {
            let what = g.pick(&["is coming", "will be late", "says hi", "is at the office", "got the tickets"]);
            stmt(g, format!("{other} {what} {time}"), vec![])
        }
        8 => {
            let fixed =
                g.pick(&["I will be on time", "I am running late", "the meeting moved to Monday", "I love the photos"]);
            stmt(g, fixed.to_string(), vec![])
        }
        // yes/no questions about the recipient
        9 => {
            let own = if g.chance(0.5) { "my" } else { p.poss };
            let own_r = if own == "my" { "my" } else { "your" };
            ask(g, format!("if {} has {own} {noun}", p.subj), vec![format!("do you have {own_r} {noun}")])
        }
        10 => {
            let state = g.pick(STATES);
            ask(g, format!("if {} is {state} {time}", p.subj), vec![format!("are you {state} {time}")])
        }
        11 => {
            let aux = g.pick(&["can", "will", "could"]);
            ask(g, format!("if {} {aux} {vb} {other} {time}", p.subj), vec![format!("{aux} you {vb} {other} {time}")])
        }
        12 => ask(g, format!("if {} {vpast} {other}", p.subj), vec![format!("did you {vb} {other}")]),
        // wh questions
        13 => {
            let state = g.pick(&["coming", "leaving", "arriving", "free"]);
            let wh = g.pick(&["when", "where"]);
            ask(g, format!("{wh} {} is {state}", p.subj), vec![format!("{wh} are you {state}")])
        }
        14 => {
            let ev = g.pick(EVENTS);
            let mut refs = vec![format!("when is {ev}")];
            if g.chance(0.3) {
                refs.push(format!("what time is {ev}"));
            }
            ask(g, format!("when {ev} is"), refs)
        }
        15 => ask(g, format!("where {other} is"), vec![format!("where is {other}")]),
        // first person and third party questions
        16 => {
            let (content, reph) = if g.chance(0.5) {
                (format!("if I can borrow {} {noun}", p.poss), format!("can I borrow your {noun}"))
            } else {
                (format!("if I can borrow the {noun}"), format!("can I borrow the {noun}"))
            };
            ask(g, content, vec![reph])
        }
        17 => {
            let state = g.pick(&["coming", "leaving", "joining us", "driving"]);
            ask(g, format!("if {other} is {state} {time}"), vec![format!("is {other} {state} {time}")])
        }
        // reminders
        18 => {
            let chore = g.pick(CHORE_VERBS);
            if g.chance(0.5) {
                let rel = g.pick(RELATIVES);
                Sample {
                    before: format!("remind {recipient} to"),
                    content: format!("call {} {rel} {time}", p.poss),
                    rephrases: vec![format!("call your {rel} {time}")],
                }
            } else {
                Sample {
                    before: "remind me to".into(),
                    content: format!("{chore} my {noun}"),
                    rephrases: vec![format!("{chore} your {noun}")],
                }
            }
        }
        // verbatim questions, reminders and statements
        _ => match g.rng.gen_range(0..5) {
            0 => Sample {
                before: format!("ask {recipient}"),
                content: format!("will I have to work {time}"),
                rephrases: vec![],
            },
            1 => Sample {
                before: format!("ask {recipient}"),
                content: format!("is {other} coming {time}"),
                rephrases: vec![],
            },
            2 => Sample {
                before: format!("ask {recipient}"),
                content: format!("can you {vb} me {tail}"),
                rephrases: vec![],
            },
            3 => Sample {
                before: format!("remind {recipient} to"),
                content: format!("{vb} {other} {time}"),
                rephrases: vec![],
            },
            _ => {
                let what = g.pick(&[
                    "the {noun} is in the car",
                    "dinner is ready",
                    "we are out of milk",
                    "the kids are asleep",
                ]);
                stmt(g, what.replace("{noun}", noun), vec![])
            }
        },
    }
}

/// Seeded templated corpus. Contents and rephrases share every proper noun;
/// about 40% of names are made up so they never appear in a fixed name list.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), known: NAMES.iter().copied().collect() };
    let mut utterances = Vec::with_capacity(n);
    for i in 0..n {
        let s = sample(&mut g);
        let query = format!("{} [ {} ]", s.before, s.content);
        let class = if s.rephrases.is_empty() { RephraseClass::Exact } else { RephraseClass::Rephrase };
        utterances.push(build_utterance(format!("syn{i:05}"), &query, (None, None), class, &s.rephrases)?);
    }
    Dataset::new(utterances, None)
}
