//! Exact match, corpus BLEU-4, SARI and the proper-noun copy-error rate.
//!
//! ```
//! use rephrase::metrics::bleu;
//!
//! let pred = vec![vec!["a", "b", "c", "d"]];
//! let refs = vec![vec![vec!["a", "b", "c", "d", "e"]]];
//! let score = bleu(&pred, &refs).unwrap();
//! assert!((score - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, RephraseClass, Utterance};
use crate::error::{Error, Result};
use crate::text::{ngrams, normalize_surfaces, NormalizationPolicy, Token};

const MAX_ORDER: usize = 4;

/// `pred` equals the gold reference (content for EXACT, top rephrase
/// otherwise) after normalization.
pub fn exact_match<S: AsRef<str>>(pred: &[S], u: &Utterance, policy: NormalizationPolicy) -> Result<bool> {
    let p = normalize_surfaces(pred, policy);
    Ok(p == normalize_surfaces(&u.reference()?, policy))
}

/// `pred` equals any acceptable reference after normalization.
pub fn em_any<S: AsRef<str>>(pred: &[S], u: &Utterance, policy: NormalizationPolicy) -> Result<bool> {
    let p = normalize_surfaces(pred, policy);
    Ok(u.all_references()?.iter().any(|r| normalize_surfaces(r, policy) == p))
}

/// How an action scores when its predicted or reference n-gram set is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptySetScore {
    /// Both empty scores 1, exactly one empty scores 0.
    #[default]
    Vacuous,
    /// Any empty set scores 0.
    Zero,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SariConfig {
    /// Score deletion by precision alone instead of F1.
    pub delete_precision: bool,
    pub empty_sets: EmptySetScore,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SariBreakdown {
    pub keep_f1: f64,
    pub add_f1: f64,
    pub delete_f1: f64,
    pub sari: f64,
}

impl SariBreakdown {
    fn from_parts(keep_f1: f64, add_f1: f64, delete_f1: f64) -> Self {
        SariBreakdown { keep_f1, add_f1, delete_f1, sari: 100.0 * (keep_f1 + add_f1 + delete_f1) / 3.0 }
    }
}

fn f1(correct: usize, predicted: usize, reference: usize, precision_only: bool, empty: EmptySetScore) -> f64 {
    match (predicted == 0, reference == 0) {
        (true, true) => {
            return match empty {
                EmptySetScore::Vacuous => 1.0,
                EmptySetScore::Zero => 0.0,
            }
        }
        (true, false) => return 0.0,
        (false, true) if !precision_only => return 0.0,
        _ => {}
    }
    let p = correct as f64 / predicted as f64;
    if precision_only {
        return p;
    }
    let r = correct as f64 / reference as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn gram_set<S: AsRef<str>>(tokens: &[S], n: usize) -> HashSet<Vec<&str>> {
    ngrams(tokens, n).expect("order >= 1").into_keys().collect()
}

/// Sentence SARI over n-gram sets for n = 1..4. The reference set is the
/// union over all references.
pub fn sari<A, B, C>(source: &[A], pred: &[B], refs: &[Vec<C>], cfg: SariConfig) -> Result<SariBreakdown>
where
    A: AsRef<str>,
    B: AsRef<str>,
    C: AsRef<str>,
{
    if refs.is_empty() {
        return Err(Error::InvalidArgument("SARI needs at least one reference".into()));
    }
    let (mut keep, mut add, mut del) = (0.0, 0.0, 0.0);
    for n in 1..=MAX_ORDER {
        let s = gram_set(source, n);
        let p = gram_set(pred, n);
        let mut r = HashSet::new();
        for reference in refs {
            r.extend(gram_set(reference, n));
        }
        let e = cfg.empty_sets;

        let sp: HashSet<_> = s.intersection(&p).collect();
        let sr: HashSet<_> = s.intersection(&r).collect();
        keep += f1(sp.intersection(&sr).count(), sp.len(), sr.len(), false, e);

        let p_new: HashSet<_> = p.difference(&s).collect();
        let r_new: HashSet<_> = r.difference(&s).collect();
        add += f1(p_new.intersection(&r_new).count(), p_new.len(), r_new.len(), false, e);

        let p_del: HashSet<_> = s.difference(&p).collect();
        let r_del: HashSet<_> = s.difference(&r).collect();
        del += f1(p_del.intersection(&r_del).count(), p_del.len(), r_del.len(), cfg.delete_precision, e);
    }
    let k = MAX_ORDER as f64;
    Ok(SariBreakdown::from_parts(keep / k, add / k, del / k))
}

/// Mean of sentence SARI (and of each component) over a corpus.
pub fn corpus_sari<A, B, C>(
    sources: &[Vec<A>],
    preds: &[Vec<B>],
    refs: &[Vec<Vec<C>>],
    cfg: SariConfig,
) -> Result<SariBreakdown>
where
    A: AsRef<str>,
    B: AsRef<str>,
    C: AsRef<str>,
{
    if sources.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if sources.len() != preds.len() || preds.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sources, {} predictions, {} reference lists",
            sources.len(),
            preds.len(),
            refs.len()
        )));
    }
    let (mut k, mut a, mut d) = (0.0, 0.0, 0.0);
    for ((s, p), r) in sources.iter().zip(preds).zip(refs) {
        let b = sari(s, p, r, cfg)?;
        k += b.keep_f1;
        a += b.add_f1;
        d += b.delete_f1;
    }
    let n = sources.len() as f64;
    Ok(SariBreakdown::from_parts(k / n, a / n, d / n))
}

/// Corpus BLEU-4 with clipped counts against multiple references, brevity
/// penalty from the closest reference length (shorter wins ties) and add-one
/// smoothing of the 2- to 4-gram precisions.
pub fn bleu<A: AsRef<str>, B: AsRef<str>>(preds: &[Vec<A>], refs: &[Vec<Vec<B>>]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if preds.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} predictions, {} reference lists", preds.len(), refs.len())));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut pred_len, mut ref_len) = (0usize, 0usize);
    for (p, rs) in preds.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::InvalidArgument("every prediction needs at least one reference".into()));
        }
        pred_len += p.len();
        ref_len += rs.iter().map(|r| r.len()).min_by_key(|&l| (l.abs_diff(p.len()), l)).expect("non-empty references");
        for n in 1..=MAX_ORDER {
            let pc = ngrams(p, n)?;
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in rs {
                for (g, c) in ngrams(r, n)? {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &pc {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if pred_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matched[0] as f64 / total[0] as f64).ln();
    for n in 1..MAX_ORDER {
        log_p += ((matched[n] + 1) as f64 / (total[n] + 1) as f64).ln();
    }
    let bp = if pred_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / pred_len as f64).exp() };
    Ok(100.0 * bp * (log_p / MAX_ORDER as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub normalization: NormalizationPolicy,
    pub sari: SariConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub em: f64,
    pub em_any: f64,
    /// EM over EXACT utterances; 0 when there are none.
    pub em_exact: f64,
    /// EM over REPHRASE utterances; 0 when there are none.
    pub em_rephrase: f64,
    pub bleu: f64,
    pub sari: f64,
    pub n_exact: usize,
    pub n_rephrase: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "em = {:.2}", self.em)?;
        writeln!(f, "em_any = {:.2}", self.em_any)?;
        writeln!(f, "em_exact = {:.2}", self.em_exact)?;
        writeln!(f, "em_rephrase = {:.2}", self.em_rephrase)?;
        writeln!(f, "bleu = {:.2}", self.bleu)?;
        writeln!(f, "sari = {:.2}", self.sari)?;
        writeln!(f, "n_exact = {}", self.n_exact)?;
        write!(f, "n_rephrase = {}", self.n_rephrase)
    }
}

fn pct(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

/// Scores `preds` (utterance id → tokens) against `ds`. BLEU and SARI use
/// every acceptable reference and the content span as SARI source, all
/// normalized like EM.
pub fn corpus_eval<S: AsRef<str>>(
    preds: &HashMap<String, Vec<S>>,
    ds: &Dataset,
    cfg: &MetricConfig,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let missing: Vec<String> = ds.iter().filter(|u| !preds.contains_key(&u.id)).map(|u| u.id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let policy = cfg.normalization;
    let (mut hits, mut any_hits, mut exact_hits, mut rephrase_hits) = (0, 0, 0, 0);
    let (mut n_exact, mut n_rephrase) = (0, 0);
    let mut sources = Vec::with_capacity(ds.len());
    let mut normalized_preds = Vec::with_capacity(ds.len());
    let mut references = Vec::with_capacity(ds.len());
    for u in ds.iter() {
        let p = &preds[&u.id];
        let em = exact_match(p, u, policy)?;
        let any = em_any(p, u, policy)?;
        debug_assert!(!em || any);
        hits += em as usize;
        any_hits += any as usize;
        match u.class {
            RephraseClass::Exact => {
                n_exact += 1;
                exact_hits += em as usize;
            }
            RephraseClass::Rephrase => {
                n_rephrase += 1;
                rephrase_hits += em as usize;
            }
        }
        sources.push(normalize_surfaces(&u.content_surfaces(), policy));
        normalized_preds.push(normalize_surfaces(p, policy));
        references.push(u.all_references()?.iter().map(|r| normalize_surfaces(r, policy)).collect::<Vec<_>>());
    }
    let n = ds.len();
    Ok(EvalReport {
        em: pct(hits, n),
        em_any: pct(any_hits, n),
        em_exact: pct(exact_hits, n_exact),
        em_rephrase: pct(rephrase_hits, n_rephrase),
        bleu: bleu(&normalized_preds, &references)?,
        sari: corpus_sari(&sources, &normalized_preds, &references, cfg.sari)?.sari,
        n_exact,
        n_rephrase,
    })
}

/// Fraction of utterances with a proper-noun-guess content token, selected
/// by `keep`, that is missing (case-insensitively) from the prediction. A
/// missing prediction counts as an empty one.
pub fn copy_error_rate_where<S: AsRef<str>>(
    preds: &HashMap<String, Vec<S>>,
    ds: &Dataset,
    keep: impl Fn(&Token) -> bool,
) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let errors = ds
        .iter()
        .filter(|u| {
            let pred: HashSet<String> =
                preds.get(&u.id).map(|p| p.iter().map(|t| t.as_ref().to_lowercase()).collect()).unwrap_or_default();
            u.content()
                .iter()
                .filter(|t| t.is_proper_noun_guess && keep(t))
                .any(|t| !pred.contains(&t.surface.to_lowercase()))
        })
        .count();
    errors as f64 / ds.len() as f64
}

/// [`copy_error_rate_where`] over every proper-noun guess.
pub fn copy_error_rate<S: AsRef<str>>(preds: &HashMap<String, Vec<S>>, ds: &Dataset) -> f64 {
    copy_error_rate_where(preds, ds, |_| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_jsonl;
    use crate::text::tokenize_surfaces;

    fn v(s: &str) -> Vec<String> {
        tokenize_surfaces(s)
    }

    fn ds(lines: &[&str]) -> Dataset {
        parse_jsonl(&lines.join("\n")).unwrap()
    }

    const KIRA: &str = r#"{"id":"k","query":"Let Kira know [ I can pick her up ]","class":"REPHRASE","rephrases":["I can pick you up","I'll pick you up"]}"#;
    const JO: &str = r#"{"id":"j","query":"Tell Jo [ I will be on time ]","class":"EXACT"}"#;
    const PHONE: &str = r#"{"id":"p","query":"remind Sam to [ pick up his phone ]","class":"REPHRASE","rephrases":["pick up your phone"]}"#;

    #[test]
    fn exact_match_cases() {
        let d = ds(&[KIRA, JO, PHONE]);
        let p = NormalizationPolicy::default();
        assert!(exact_match(&v("I can pick you up"), &d.utterances[0], p).unwrap());
        assert!(exact_match(&v("I will be on time."), &d.utterances[1], p).unwrap());
        assert!(!exact_match(&v("can you pick up your phone"), &d.utterances[2], p).unwrap());
    }

    #[test]
    fn em_any_separates_annotations() {
        let d = ds(&[KIRA]);
        let u = &d.utterances[0];
        let p = NormalizationPolicy::default();
        let second = v("I'll pick you up");
        assert!(!exact_match(&second, u, p).unwrap());
        assert!(em_any(&second, u, p).unwrap());
        assert!(!em_any(&v("pick up"), u, p).unwrap());
    }

    #[test]
    fn rephrase_without_reference_errors() {
        let mut d = ds(&[KIRA]);
        d.utterances[0].rephrases.clear();
        let r = exact_match(&v("x"), &d.utterances[0], NormalizationPolicy::default());
        assert!(matches!(r, Err(Error::InvalidUtterance(_))));
    }

    #[test]
    fn corpus_counts_and_missing() {
        let d = ds(&[KIRA, JO]);
        let mut preds: HashMap<String, Vec<String>> = HashMap::new();
        preds.insert("k".into(), v("I can pick you up"));
        let err = corpus_eval(&preds, &d, &MetricConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingPredictions(ref ids) if ids == &["j".to_string()]));
        preds.insert("j".into(), v("I will be on time"));
        let r = corpus_eval(&preds, &d, &MetricConfig::default()).unwrap();
        assert_eq!((r.em, r.em_any, r.n_exact, r.n_rephrase), (100.0, 100.0, 1, 1));
        assert_eq!(r.bleu, 100.0);
        // the second Kira annotation adds n-grams the prediction does not use
        assert!(r.sari < 100.0);
    }

    #[test]
    fn exact_copy_predictor() {
        let d = ds(&[KIRA, JO, PHONE]);
        let preds: HashMap<String, Vec<String>> = d.iter().map(|u| (u.id.clone(), u.content_surfaces())).collect();
        let r = corpus_eval(&preds, &d, &MetricConfig::default()).unwrap();
        assert_eq!((r.em_exact, r.em_rephrase), (100.0, 0.0));
        assert!((r.em - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(copy_error_rate(&preds, &d), 0.0);
    }

    #[test]
    fn bleu_identity_and_errors() {
        let p = vec![v("do you have my keys"), v("hi")];
        let r: Vec<Vec<Vec<String>>> = p.iter().map(|x| vec![x.clone()]).collect();
        assert!((bleu(&p, &r).unwrap() - 100.0).abs() < 1e-9);
        let empty: Vec<Vec<String>> = vec![];
        let no_refs: Vec<Vec<Vec<String>>> = vec![];
        assert!(bleu(&empty, &no_refs).is_err());
        assert_eq!(bleu(&[v("x y")], &[vec![v("a b")]]).unwrap(), 0.0);
    }

    #[test]
    fn bleu_closest_reference_length() {
        // closest of lengths {2, 6} to a 5-token prediction is 6
        let p = vec![v("a b c d e")];
        let r = vec![vec![v("a b"), v("a b c d e f")]];
        let expected = 100.0 * (1.0f64 - 6.0 / 5.0).exp();
        assert!((bleu(&p, &r).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn sari_identity_is_100() {
        let s = v("I will be on time");
        let b = sari(&s, &s, std::slice::from_ref(&s), SariConfig::default()).unwrap();
        assert_eq!((b.keep_f1, b.add_f1, b.delete_f1), (1.0, 1.0, 1.0));
        assert_eq!(b.sari, 100.0);
        let z = sari(
            &s,
            &s,
            std::slice::from_ref(&s),
            SariConfig { empty_sets: EmptySetScore::Zero, ..Default::default() },
        );
        assert!((z.unwrap().sari - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn sari_by_hand_unigram_view() {
        // single tokens so only n = 1 has non-empty sets for the add action
        let b = sari(&["a"], &["b"], &[vec!["b"]], SariConfig::default()).unwrap();
        // keep: nothing kept, nothing to keep -> vacuous 1 at every n
        assert_eq!(b.keep_f1, 1.0);
        // add n=1: 1/1, n>1 vacuous
        assert_eq!(b.add_f1, 1.0);
        assert_eq!(b.delete_f1, 1.0);
        assert!(sari(&["a"], &["a"], &Vec::<Vec<&str>>::new(), SariConfig::default()).is_err());
    }

    #[test]
    fn delete_precision_variant() {
        // source a b c, pred deletes b and c, reference deletes only c
        let src = ["a", "b", "c"];
        let f = sari(&src, &["a"], &[vec!["a", "b"]], SariConfig::default()).unwrap();
        let p =
            sari(&src, &["a"], &[vec!["a", "b"]], SariConfig { delete_precision: true, ..Default::default() }).unwrap();
        // unigram delete: pred {b, c}, ref {c}: precision 1/2, recall 1
        let uni_p = 0.5;
        let uni_f = 2.0 * 0.5 * 1.0 / 1.5;
        // bigram: S = {ab, bc}, P = {}, R = {ab}: pred deletes {ab, bc}, ref deletes {bc} -> same ratios
        // trigram: S = {abc}, both delete it -> 1; 4-gram: vacuous 1
        assert!((p.delete_f1 - (uni_p + uni_p + 1.0 + 1.0) / 4.0).abs() < 1e-12);
        assert!((f.delete_f1 - (uni_f + uni_f + 1.0 + 1.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn copy_error_counts_dropped_names() {
        let d = ds(&[r#"{"id":"b","query":"tell Brad [ Kira says hi ]","class":"EXACT"}"#]);
        let mut preds: HashMap<String, Vec<String>> = HashMap::new();
        preds.insert("b".into(), v("says hi"));
        assert_eq!(copy_error_rate(&preds, &d), 1.0);
        preds.insert("b".into(), v("kira says hi"));
        assert_eq!(copy_error_rate(&preds, &d), 0.0);
        let plain =
            ds(&[r#"{"id":"x","query":"ask [ when dinner is ]","class":"REPHRASE","rephrases":["when is dinner"]}"#]);
        let none: HashMap<String, Vec<String>> = HashMap::new();
        assert_eq!(copy_error_rate(&none, &plain), 0.0);
    }
}
