mod common;

use common::{bleu_oracle, random_sentence, sari_oracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rephrase::corpus::{RephraseClass, Utterance};
use rephrase::metrics::{bleu, em_any, exact_match, sari, EmptySetScore, SariConfig};
use rephrase::text::{NormalizationPolicy, Token};

#[test]
fn sari_matches_membership_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..100 {
        let source = random_sentence(&mut rng, 1, 7);
        let pred = random_sentence(&mut rng, 0, 7);
        let refs: Vec<Vec<String>> = (0..rng.gen_range(1..=3)).map(|_| random_sentence(&mut rng, 0, 7)).collect();
        for (delete_precision, empty_sets) in
            [(false, EmptySetScore::Vacuous), (true, EmptySetScore::Vacuous), (false, EmptySetScore::Zero)]
        {
            let got = sari(&source, &pred, &refs, SariConfig { delete_precision, empty_sets }).unwrap();
            let (k, a, d, s) =
                sari_oracle(&source, &pred, &refs, delete_precision, empty_sets == EmptySetScore::Vacuous);
            assert!((got.keep_f1 - k).abs() < 1e-9, "trial {trial}");
            assert!((got.add_f1 - a).abs() < 1e-9, "trial {trial}");
            assert!((got.delete_f1 - d).abs() < 1e-9, "trial {trial}");
            assert!((got.sari - s).abs() < 1e-9, "trial {trial}");
        }
    }
}

#[test]
fn bleu_matches_product_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let preds: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut rng, 0, 8)).collect();
        let refs: Vec<Vec<Vec<String>>> =
            (0..n).map(|_| (0..rng.gen_range(1..=3)).map(|_| random_sentence(&mut rng, 1, 8)).collect()).collect();
        let got = bleu(&preds, &refs).unwrap();
        assert!((got - bleu_oracle(&preds, &refs)).abs() < 1e-9);
    }
}

#[test]
fn identical_corpus_scores_full_bleu() {
    let s: Vec<Vec<String>> = vec!["tell him I am on my way".split(' ').map(String::from).collect()];
    let refs = vec![s.clone()];
    assert!((bleu(&s, &refs).unwrap() - 100.0).abs() < 1e-9);
}

fn utterance(content: &[String], class: RephraseClass, rephrases: Vec<Vec<String>>) -> Utterance {
    Utterance {
        id: "u".into(),
        query_tokens: content.iter().map(Token::new).collect(),
        content_span: (0, content.len()),
        class,
        rephrases,
    }
}

#[test]
fn exact_match_implies_em_any() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = NormalizationPolicy::default();
    let mut both = 0;
    for _ in 0..1000 {
        let content = random_sentence(&mut rng, 1, 3);
        let class = if rng.gen_bool(0.5) { RephraseClass::Exact } else { RephraseClass::Rephrase };
        let k = if class == RephraseClass::Rephrase { rng.gen_range(1..=3) } else { rng.gen_range(0..=2) };
        let rephrases = (0..k).map(|_| random_sentence(&mut rng, 1, 3)).collect();
        let u = utterance(&content, class, rephrases);
        let pred = random_sentence(&mut rng, 1, 3);
        let em = exact_match(&pred, &u, policy).unwrap();
        if em {
            assert!(em_any(&pred, &u, policy).unwrap());
            both += 1;
        }
    }
    assert!(both > 0, "generator never produced a match");
}
