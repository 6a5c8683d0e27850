//! Brute-force oracles and random instance generators shared by the
//! integration tests. Each oracle is written from the definition, without
//! reusing library code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use numcore::{Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

pub fn random_sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<String> {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

fn grams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].join(" ")).collect()
}

fn gram_set(tokens: &[String], n: usize) -> BTreeSet<String> {
    grams(tokens, n).into_iter().collect()
}

/// F1 of one SARI operation; `vacuous` scores two empty sets as 1.
fn op_score(correct: usize, pred: usize, reference: usize, precision_only: bool, vacuous: bool) -> f64 {
    if pred == 0 && reference == 0 {
        return if vacuous { 1.0 } else { 0.0 };
    }
    if pred == 0 {
        return 0.0;
    }
    let p = correct as f64 / pred as f64;
    if precision_only {
        return p;
    }
    if reference == 0 {
        return 0.0;
    }
    let r = correct as f64 / reference as f64;
    if correct == 0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Sentence SARI by classifying every n-gram of the union of source,
/// prediction and references by its membership pattern.
pub fn sari_oracle(
    source: &[String],
    pred: &[String],
    refs: &[Vec<String>],
    delete_precision: bool,
    vacuous: bool,
) -> (f64, f64, f64, f64) {
    let mut totals = [0.0; 3];
    for n in 1..=4 {
        let s = gram_set(source, n);
        let p = gram_set(pred, n);
        let r: BTreeSet<String> = refs.iter().flat_map(|x| gram_set(x, n)).collect();
        let universe: BTreeSet<&String> = s.iter().chain(&p).chain(&r).collect();
        // counts: [keep, add, delete] x [pred, ref, both]
        let mut c = [[0usize; 3]; 3];
        for g in universe {
            let (in_s, in_p, in_r) = (s.contains(g), p.contains(g), r.contains(g));
            let ops = [(in_s && in_p, in_s && in_r), (!in_s && in_p, !in_s && in_r), (in_s && !in_p, in_s && !in_r)];
            for (k, (a, b)) in ops.into_iter().enumerate() {
                c[k][0] += a as usize;
                c[k][1] += b as usize;
                c[k][2] += (a && b) as usize;
            }
        }
        totals[0] += op_score(c[0][2], c[0][0], c[0][1], false, vacuous);
        totals[1] += op_score(c[1][2], c[1][0], c[1][1], false, vacuous);
        totals[2] += op_score(c[2][2], c[2][0], c[2][1], delete_precision, vacuous);
    }
    let (k, a, d) = (totals[0] / 4.0, totals[1] / 4.0, totals[2] / 4.0);
    (k, a, d, 100.0 * (k + a + d) / 3.0)
}

fn count(list: &[String]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for g in list {
        *m.entry(g.as_str()).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU-4 as a product of modified precisions times the brevity
/// penalty, add-one smoothing on orders 2 to 4.
pub fn bleu_oracle(preds: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (p, rs) in preds.iter().zip(refs) {
        c += p.len();
        let mut best = rs[0].len();
        for x in rs {
            let d = x.len().abs_diff(p.len());
            let bd = best.abs_diff(p.len());
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
        for n in 1..=4 {
            let pg = grams(p, n);
            let pc = count(&pg);
            let ref_grams: Vec<Vec<String>> = rs.iter().map(|x| grams(x, n)).collect();
            for (g, k) in pc {
                let allowed = ref_grams.iter().map(|rg| rg.iter().filter(|x| x.as_str() == g).count()).max().unwrap();
                num[n - 1] += k.min(allowed);
            }
            den[n - 1] += pg.len();
        }
    }
    if c == 0 || num[0] == 0 {
        return 0.0;
    }
    let mut prod = num[0] as f64 / den[0] as f64;
    for n in 1..4 {
        prod *= (num[n] + 1) as f64 / (den[n] + 1) as f64;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * prod.powf(0.25)
}

/// Every tag sequence of length `len` over `k` tags.
pub fn all_paths(len: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn path_score(e: &Tensor, t: &Tensor, path: &[usize]) -> Real {
    let mut s = 0.0;
    for (i, &y) in path.iter().enumerate() {
        s += e.get(i, y);
        if i > 0 {
            s += t.get(path[i - 1], y);
        }
    }
    s
}

/// `(log Z, best path, best score)` by enumeration. Ties keep the first
/// path in lexicographic order.
pub fn crf_brute_force(e: &Tensor, t: &Tensor) -> (Real, Vec<usize>, Real) {
    let (len, k) = e.dims();
    let scores: Vec<(Vec<usize>, Real)> = all_paths(len, k)
        .into_iter()
        .map(|p| {
            let s = path_score(e, t, &p);
            (p, s)
        })
        .collect();
    let max = scores.iter().map(|x| x.1).fold(Real::NEG_INFINITY, Real::max);
    let z = max + scores.iter().map(|x| (x.1 - max).exp()).sum::<Real>().ln();
    let (best, score) =
        scores.iter().fold(
            (Vec::new(), Real::NEG_INFINITY),
            |acc, (p, s)| {
                if *s > acc.1 {
                    (p.clone(), *s)
                } else {
                    acc
                }
            },
        );
    (z, best, score)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: Real) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// Length of the longest common subsequence by trying every subset of `s`.
pub fn lcs_brute_force(s: &[String], t: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << s.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&String> = s.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, x)| x).collect();
        if is_subsequence(&sub, t) {
            best = k;
        }
    }
    best
}
