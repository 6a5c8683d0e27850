use numcore::{grad_check, GradCheckConfig, Graph, NumError, ParamStore, Real, Tensor};
use rephrase::corpus::{generate_synthetic, Dataset, Utterance};
use rephrase::editops::{extract_phrases, PhraseVocabulary, Tagged};
use rephrase::models::*;
use rephrase::train::*;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn subset(ds: &Dataset, range: std::ops::Range<usize>) -> Dataset {
    Dataset::new(ds.utterances[range].to_vec(), None).unwrap()
}

fn vocab_for(ds: &Dataset) -> Vocab {
    let pairs = ds.source_target_pairs().unwrap();
    let sents: Vec<Vec<String>> = pairs.into_iter().flat_map(|(s, t)| [s, t]).collect();
    Vocab::build(sents.iter().map(|s| s.as_slice()), 8000, 1)
}

fn small_lstm(vocab: Vocab, seed: u64) -> PointerGenLstm {
    let cfg = PointerGenConfig {
        emb_dim: 24,
        enc_hidden: 24,
        enc_layers: 1,
        dec_hidden: 32,
        dec_layers: 1,
        attn_dim: 24,
        dropout: 0.0,
        init_seed: seed,
        ..Default::default()
    };
    PointerGenLstm::new(cfg, vocab).unwrap()
}

fn constant_outputs(g: &mut Graph, p_output: Tensor, alpha: Tensor, p_copy: Tensor) -> StepOutputs {
    StepOutputs { p_output: g.constant(p_output), alpha: Some(g.constant(alpha)), p_copy: Some(g.constant(p_copy)) }
}

#[test]
fn nll_closed_forms() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let one_hot = g.constant(Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    let l = nll_loss(&mut g, one_hot, &[1, 2]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let uniform = g.constant(Tensor::filled(&[4, 7], 1.0 / 7.0));
    let l = nll_loss(&mut g, uniform, &[0, 3, 6, 1]).unwrap();
    assert!((g.value(l).item() - (7.0 as Real).ln()).abs() < 1e-12);
    assert!(nll_loss(&mut g, uniform, &[0]).is_err());
    let zero = g.constant(Tensor::zeros(&[1, 2]));
    let l = nll_loss(&mut g, zero, &[0]).unwrap();
    assert!(g.value(l).item().is_finite());
    assert_eq!(g.log_clamps(), 1);
}

#[test]
fn hinge_closed_forms() {
    let store = ParamStore::new();
    let cfg = CopyLossConfig::default();
    let hinge_at = |alpha: Real, p: Real, target: usize, flag: bool| {
        let mut g = Graph::new(&store);
        let out = constant_outputs(
            &mut g,
            Tensor::filled(&[1, 9], 1.0 / 9.0),
            Tensor::filled(&[1, 1], alpha),
            Tensor::row(vec![p, 1.0 - p]),
        );
        let c = CopyLossConfig { hinge_on_alpha_only: flag, ..cfg };
        let l = copy_hinge_loss(&mut g, &out, &[target], &[7, 8], &c).unwrap();
        g.value(l).item()
    };
    assert_eq!(hinge_at(1.0, 0.95, 7, false), 0.0);
    assert!((hinge_at(1.0, 0.5, 7, false) - 0.1).abs() < 1e-12);
    assert!((hinge_at(0.5, 1.0, 7, false) - 0.1).abs() < 1e-12);
    assert_eq!(hinge_at(0.1, 0.1, 5, false), 0.0);
    assert!((hinge_at(0.5, 0.01, 7, true) - 0.1).abs() < 1e-12);
}

#[test]
fn hinge_sums_over_copiable_positions() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    // target: token 7 (source positions 0 and 2), token 3 (absent), token 8 (position 1)
    let out = constant_outputs(
        &mut g,
        Tensor::filled(&[3, 9], 1.0 / 9.0),
        Tensor::matrix(3, 1, vec![0.8, 0.9, 0.5]).unwrap(),
        Tensor::matrix(3, 3, vec![0.3, 0.4, 0.3, 0.2, 0.2, 0.6, 0.1, 0.8, 0.1]).unwrap(),
    );
    let l = copy_hinge_loss(&mut g, &out, &[7, 3, 8], &[7, 8, 7], &CopyLossConfig::default()).unwrap();
    let expected = 0.25 * ((0.9 - 0.8 * 0.6) + (0.9 - 0.5 * 0.8));
    assert!((g.value(l).item() - expected).abs() < 1e-12);
}

fn to_num(e: rephrase::Error) -> NumError {
    NumError::InvalidArgument(e.to_string())
}

#[test]
fn loss_gradients_pass_grad_check() {
    let ds = generate_synthetic(20, 1).unwrap();
    let pairs = ds.source_target_pairs().unwrap();
    let cfg = GradCheckConfig { samples_per_param: 4, eps: 1e-4, ..Default::default() };
    let copy = CopyLossConfig { threshold: 1.0, ..Default::default() };

    let mut m = small_lstm(vocab_for(&ds), 2);
    let pair = m.vocab().encode_pair(&pairs[0].0, &pairs[0].1);
    let model = m.clone();
    let report =
        grad_check(m.params_mut(), |g| seq2seq_loss(&model, g, &pair, Some(&copy), None).map_err(to_num), &cfg)
            .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    let tcfg = TransformerConfig { d_model: 8, heads: 2, ff_dim: 8, max_len: 32, ..Default::default() };
    let mut t = MiniTransformer::new(tcfg, vocab_for(&ds)).unwrap();
    t.graft_copy_head(0).unwrap();
    let pair = t.vocab().encode_pair(&pairs[1].0, &pairs[1].1);
    let model = t.clone();
    let report =
        grad_check(t.params_mut(), |g| seq2seq_loss(&model, g, &pair, Some(&copy), None).map_err(to_num), &cfg)
            .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn overfits_ten_examples() {
    let ds = generate_synthetic(10, 2).unwrap();
    let mut m = small_lstm(vocab_for(&ds), 0);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 5,
        learning_rate: 5e-3,
        target_valid_em: Some(1.0),
        ..Default::default()
    };
    let report = train_seq2seq(&mut m, &ds, Some(&ds), &cfg, None, None).unwrap();
    assert_eq!(report.best_valid_em, Some(1.0), "{:?}", report.log.last());
}

#[test]
fn pinned_copy_gate_emits_unseen_tokens() {
    let sents = ["alpha beta gamma", "beta gamma delta", "gamma delta alpha", "delta alpha beta"];
    let pairs: Vec<(Vec<String>, Vec<String>)> = sents.iter().map(|s| (words(s), words(s))).collect();
    let vocab = Vocab::build(pairs.iter().map(|p| p.0.as_slice()), 100, 1);
    let cfg = PointerGenConfig {
        emb_dim: 16,
        enc_hidden: 16,
        enc_layers: 1,
        dec_hidden: 24,
        dec_layers: 1,
        attn_dim: 16,
        dropout: 0.0,
        alpha_pin: Some(1.0),
        init_seed: 1,
    };
    let mut m = PointerGenLstm::new(cfg, vocab).unwrap();
    let tcfg = TrainConfig { epochs: 150, batch_size: 4, learning_rate: 1e-2, ..Default::default() };
    fit_pairs(&mut m, &pairs, None, &tcfg, None, None).unwrap();
    // END never occurs in a source, so a fully pinned gate cannot stop early
    let unseen = words("Xanthe Ruvo Pelk");
    let out = greedy_decode(&m, &unseen, 3).unwrap();
    assert_eq!(out.tokens, unseen);
}

fn strip_time(r: &TrainReport) -> Vec<(usize, Real, Option<f64>, Option<Real>)> {
    r.log.iter().map(|e| (e.epoch, e.train_loss, e.valid_em, e.valid_loss)).collect()
}

#[test]
fn training_is_reproducible_and_logged() {
    let ds = generate_synthetic(30, 3).unwrap();
    let (train, valid) = (subset(&ds, 0..24), subset(&ds, 24..30));
    let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 5, ..Default::default() };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut m = small_lstm(vocab_for(&train), 1);
        let mut log = Vec::new();
        let r = train_seq2seq(&mut m, &train, Some(&valid), &cfg, None, Some(&mut log)).unwrap();
        runs.push((strip_time(&r), m.params().clone(), String::from_utf8(log).unwrap()));
    }
    assert_eq!(runs[0].0, runs[1].0);
    for ((_, a), (_, b)) in runs[0].1.iter().zip(runs[1].1.iter()) {
        assert_eq!(a.value, b.value);
    }
    let lines: Vec<&str> = runs[0].2.lines().collect();
    assert_eq!(lines.len(), 2);
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for key in ["epoch", "train_loss", "valid_em", "valid_em_any", "wall_time"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

#[test]
fn zero_lambda_equals_plain_finetuning() {
    let ds = generate_synthetic(24, 4).unwrap();
    let tcfg = TransformerConfig { d_model: 16, heads: 2, ff_dim: 16, max_len: 48, ..Default::default() };
    let base = MiniTransformer::new(tcfg, vocab_for(&ds)).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 6, seed: 2, ..Default::default() };

    let mut hinge = base.clone();
    let zero = CopyLossConfig { lambda: 0.0, ..Default::default() };
    let a = finetune_with_copy(&mut hinge, &ds, None, &cfg, &zero, None).unwrap();

    let mut plain = base.clone();
    plain.graft_copy_head(cfg.seed).unwrap();
    let b = train_seq2seq(&mut plain, &ds, None, &cfg, None, None).unwrap();

    assert_eq!(strip_time(&a), strip_time(&b));
    let mut again = hinge.clone();
    assert!(finetune_with_copy(&mut again, &ds, None, &cfg, &zero, None).is_err());
}

#[test]
fn denoising_without_noise_learns_identity() {
    let corpus: Vec<Vec<String>> =
        ["tell Brad I am late", "ask her about dinner", "let them know", "I will call you back"]
            .iter()
            .map(|s| words(s))
            .collect();
    let vocab = Vocab::build(corpus.iter().map(|s| s.as_slice()), 100, 1);
    let tcfg = TransformerConfig { d_model: 16, heads: 2, ff_dim: 32, max_len: 16, dropout: 0.0, ..Default::default() };
    let mut m = MiniTransformer::new(tcfg, vocab).unwrap();
    let cfg = TrainConfig { epochs: 120, batch_size: 4, learning_rate: 5e-3, ..Default::default() };
    let none = NoisePolicy { mask_prob: 0.0, span_infill: true };
    let report = pretrain_denoising(&mut m, &corpus, none, &cfg, None).unwrap();
    assert!(report.log.last().unwrap().train_loss < report.log[0].train_loss);
    for s in &corpus {
        assert_eq!(&greedy_decode(&m, s, 10).unwrap().tokens, s);
    }
    assert!(pretrain_denoising(&mut m, &Vec::<Vec<String>>::new(), none, &cfg, None).is_err());
}

#[test]
fn denoising_is_seeded() {
    let ds = generate_synthetic(12, 5).unwrap();
    let corpus: Vec<Vec<String>> = ds.iter().map(|u| u.model_source()).collect();
    let tcfg = TransformerConfig { d_model: 8, heads: 2, ff_dim: 8, max_len: 48, ..Default::default() };
    let base = MiniTransformer::new(tcfg, vocab_for(&ds)).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..Default::default() };
    let mut a = base.clone();
    let mut b = base.clone();
    let ra = pretrain_denoising(&mut a, &corpus, NoisePolicy::default(), &cfg, None).unwrap();
    let rb = pretrain_denoising(&mut b, &corpus, NoisePolicy::default(), &cfg, None).unwrap();
    assert_eq!(strip_time(&ra), strip_time(&rb));
}

struct SilentTeacher;

impl Teacher for SilentTeacher {
    fn teach(&self, u: &Utterance, _: DecodeStrategy, _: usize) -> rephrase::Result<Vec<String>> {
        Ok(if u.id.ends_with('0') { Vec::new() } else { u.content_surfaces() })
    }
}

#[test]
fn oracle_distillation_equals_plain_training() {
    let ds = generate_synthetic(20, 6).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 5, seed: 3, ..Default::default() };
    let dcfg = DistillConfig { finetune_on_gold: false, ..Default::default() };
    let mut plain = small_lstm(vocab_for(&ds), 4);
    let mut student = plain.clone();
    let a = train_seq2seq(&mut plain, &ds, Some(&ds), &cfg, None, None).unwrap();
    let b = distill(&OracleTeacher, &mut student, &ds, Some(&ds), &dcfg, &cfg, None, None).unwrap();
    assert_eq!(b.pseudo_pairs, 20);
    assert_eq!(b.skipped, 0);
    assert!(b.gold_log.is_none());
    assert_eq!(strip_time(&a), strip_time(&b.distill_log));
    for ((_, x), (_, y)) in plain.params().iter().zip(student.params().iter()) {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn empty_teacher_outputs_are_skipped() {
    let ds = generate_synthetic(20, 7).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 5, ..Default::default() };
    let mut student = small_lstm(vocab_for(&ds), 0);
    let r = distill(&SilentTeacher, &mut student, &ds, None, &DistillConfig::default(), &cfg, None, None).unwrap();
    assert_eq!(r.skipped, 2);
    assert_eq!(r.pseudo_pairs, 18);
    assert!(r.gold_log.is_some());
}

#[test]
fn model_teacher_labels_with_its_decoder() {
    let ds = generate_synthetic(6, 8).unwrap();
    let teacher = small_lstm(vocab_for(&ds), 1);
    let t = ModelTeacher(&teacher);
    for u in ds.iter() {
        let label = t.teach(u, DecodeStrategy::Greedy, 7).unwrap();
        assert_eq!(label, greedy_decode(&teacher, &u.model_source(), 7).unwrap().tokens);
    }
    assert_eq!(
        ExactCopyTeacher.teach(&ds.utterances[0], DecodeStrategy::Greedy, 7).unwrap(),
        ds.utterances[0].content_surfaces()
    );
}

#[test]
fn grid_enumerates_and_breaks_ties() {
    let spec = GridSpec::default();
    assert_eq!(spec.lambdas.len(), 19);
    assert_eq!(spec.thresholds.len(), 11);
    assert_eq!(spec.cells().len(), 209);
    assert_eq!(spec.lambdas[0], 0.1);
    assert_eq!(*spec.lambdas.last().unwrap(), 1.0);
    assert_eq!(spec.thresholds[8], 0.9);

    // flat score: the smallest lambda and threshold win
    let flat = grid_search(&spec, |_| Ok(0.5)).unwrap();
    assert_eq!((flat.best.lambda, flat.best.threshold), (0.1, 0.5));

    let score = |c: &CopyLossConfig| Ok(-((c.lambda - 0.25).abs() + (c.threshold - 0.9).abs()).min(0.3));
    let report = grid_search(&spec, score).unwrap();
    assert!(report.cells.iter().all(|c| c.valid_em <= report.best.valid_em));
    assert!((report.best.lambda - 0.25).abs() < 1e-12 && (report.best.threshold - 0.9).abs() < 1e-12);
    let csv = report.to_csv();
    assert!(csv.starts_with("lambda,T,valid_em\n"));
    assert_eq!(csv.lines().count(), 210);
}

#[test]
fn tagger_memorizes_and_rejects_uncovered_pairs() {
    let ds = generate_synthetic(10, 9).unwrap();
    let pairs = ds.content_target_pairs().unwrap();
    let phrases = extract_phrases(&pairs);
    let sents: Vec<Vec<String>> = pairs.iter().map(|p| p.0.clone()).collect();
    let vocab = Vocab::build(sents.iter().map(|s| s.as_slice()), 1000, 1);
    let tcfg = TaggerConfig {
        d_model: 16,
        heads: 2,
        ff_dim: 32,
        layers: 1,
        mlp_hidden: 16,
        dropout: 0.0,
        ..Default::default()
    };
    let mut tagger = CrfTagger::new(tcfg.clone(), vocab.clone(), phrases.clone()).unwrap();
    let tagged = tag_pairs(&pairs, &phrases);
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 5,
        learning_rate: 5e-3,
        target_valid_em: Some(1.0),
        ..Default::default()
    };
    train_tagger(&mut tagger, &tagged, Some(&ds), &cfg, None).unwrap();
    let gold: Vec<(Vec<String>, _)> = tagged.iter().map(|(c, t)| (c.clone(), t.clone().covered().unwrap())).collect();
    assert_eq!(tag_accuracy(&tagger, &gold).unwrap(), 1.0);
    for (content, target) in &pairs {
        assert_eq!(&tagger.rephrase(content).unwrap(), target);
    }

    let empty = PhraseVocabulary::from_counts(Vec::new()).unwrap();
    let uncovered = tag_pairs(&pairs, &empty);
    let idx = uncovered.iter().position(|(_, t)| matches!(t, Tagged::NotCovered { .. })).unwrap();
    let mut fresh = CrfTagger::new(tcfg, vocab, empty).unwrap();
    match train_tagger(&mut fresh, &uncovered, None, &cfg, None) {
        Err(rephrase::Error::NotCovered(i)) => assert_eq!(i, idx),
        other => panic!("expected NotCovered, got {other:?}"),
    }
}

#[test]
fn combined_loss_averages_hinge_over_target_positions() {
    let ds = generate_synthetic(10, 4).unwrap();
    let pairs = ds.source_target_pairs().unwrap();
    let m = small_lstm(vocab_for(&ds), 5);
    let copy = CopyLossConfig::default();
    for (s, t) in &pairs {
        let pair = m.vocab().encode_pair(s, t);
        let mut g = Graph::new(m.params());
        let combined = seq2seq_loss(&m, &mut g, &pair, Some(&copy), None).unwrap();
        let combined = g.value(combined).item();
        let mut g = Graph::new(m.params());
        let out = m.teacher_forced(&mut g, &pair, None).unwrap();
        let nll = nll_loss(&mut g, out.p_output, &pair.target).unwrap();
        let hinge = copy_hinge_loss(&mut g, &out, &pair.target, &pair.source.ext_ids, &copy).unwrap();
        let expected = g.value(nll).item() + g.value(hinge).item() / pair.target.len() as Real;
        assert!((combined - expected).abs() < 1e-12, "{combined} vs {expected}");
    }
}
