use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rephrase::corpus::{compute_stats, generate_synthetic, Dataset, TsvColumns, Utterance};
use rephrase::editops::{coverage_curve, extract_phrases, Tagged};
use rephrase::metrics::{copy_error_rate, corpus_eval};
use rephrase::models::*;
use rephrase::train::*;

use crate::config::{existing, RunConfig};
use crate::{Arch, CliError, Command, Common, TsvArgs};

type CliResult<T = ()> = Result<T, CliError>;

pub const DATA_FILE: &str = "data.jsonl";
pub const MODEL_DIR: &str = "model";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

/// Loads the config file and applies the TSV column flags.
fn load_config(path: Option<&Path>, tsv: Option<&TsvArgs>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(t) = tsv {
        if let Some(query) = t.tsv_query {
            let class = t.tsv_class.ok_or_else(|| CliError::Usage("--tsv-query needs --tsv-class".into()))?;
            cfg.data.format = "tsv".into();
            cfg.data.tsv = Some(TsvColumns {
                id: t.tsv_id,
                query,
                class,
                rephrases: t.tsv_rephrases.clone(),
                span_start: t.tsv_span_start,
                span_end: t.tsv_span_end,
                has_header: t.tsv_header,
            });
        }
    }
    Ok(cfg)
}

/// Resolves the seed, validates, and writes the resolved config to `--out`
/// before any work starts.
fn begin(cfg: &mut RunConfig, common: &Common) -> CliResult<Option<PathBuf>> {
    cfg.resolve(common.seed)?;
    if let Some(out) = &common.out {
        cfg.write(out)?;
    }
    Ok(common.out.clone())
}

fn require_out(common: &Common) -> CliResult<PathBuf> {
    common.out.clone().ok_or_else(|| CliError::Usage("this command needs --out".into()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn log_file(out: &Path, name: &str) -> CliResult<File> {
    let path = out.join(name);
    File::create(&path).with_context(|| format!("creating {}", path.display())).map_err(runtime)
}

fn seq2seq_vocab(ds: &Dataset, cfg: &RunConfig) -> CliResult<Vocab> {
    let pairs = ds.source_target_pairs()?;
    let sents: Vec<Vec<String>> = pairs.into_iter().flat_map(|(s, t)| [s, t]).collect();
    Ok(Vocab::build(sents.iter().map(|s| s.as_slice()), cfg.vocab.max_size, cfg.vocab.min_count))
}

fn save_model(model: &AnyModel, out: &Path) -> CliResult {
    model.save(&out.join(MODEL_DIR))?;
    Ok(())
}

fn report_json(report: &TrainReport) -> serde_json::Value {
    serde_json::json!({
        "epochs": report.log.len(),
        "best_epoch": report.best_epoch,
        "best_valid_em": report.best_valid_em,
        "stopped_early": report.stopped_early,
        "log_clamps": report.log_clamps,
        "final_train_loss": report.log.last().map(|e| e.train_loss),
    })
}

fn finish_training(out: &Path, model: &AnyModel, reports: serde_json::Value) -> CliResult {
    save_model(model, out)?;
    let text = serde_json::to_string_pretty(&reports).map_err(runtime)?;
    write_file(&out.join("report.json"), &text)?;
    println!("{text}");
    println!("model saved to {}", out.join(MODEL_DIR).display());
    Ok(())
}

pub fn run(command: Command) -> CliResult {
    match command {
        Command::GenData { n, common } => gen_data(n, &common),
        Command::Stats { data, common, tsv } => stats(&data, &common, &tsv),
        Command::Train { arch, data, valid, common, tsv } => train(arch, &data, valid.as_deref(), &common, &tsv),
        Command::Pretrain { data, common, tsv } => pretrain(&data, &common, &tsv),
        Command::FinetuneCopy { checkpoint, data, valid, lambda, threshold, common, tsv } => {
            finetune_copy(&checkpoint, &data, valid.as_deref(), lambda, threshold, &common, &tsv)
        }
        Command::Distill { teacher, student_config, student_arch, data, valid, beam, ft_gold, common, tsv } => {
            let opts = DistillOpts { student_config, student_arch, beam, ft_gold };
            distill_cmd(&teacher, &data, valid.as_deref(), opts, &common, &tsv)
        }
        Command::Gridsearch { data, valid, checkpoint, common, tsv } => {
            gridsearch(&data, &valid, checkpoint.as_deref(), &common, &tsv)
        }
        Command::Predict { checkpoint, data, decode, common, tsv } => {
            predict(&checkpoint, &data, decode.as_deref(), &common, &tsv)
        }
        Command::Eval { pred, data, common, tsv } => eval(&pred, &data, &common, &tsv),
        Command::Phrases { data, top_k, common, tsv } => phrases(&data, top_k, &common, &tsv),
    }
}

fn gen_data(n: usize, common: &Common) -> CliResult {
    let mut cfg = load_config(common.config.as_deref(), None)?;
    let out = require_out(common)?;
    begin(&mut cfg, common)?;
    let ds = generate_synthetic(n, cfg.seed)?;
    let path = out.join(DATA_FILE);
    ds.save_jsonl(&path)?;
    println!("wrote {} utterances to {}", ds.len(), path.display());
    Ok(())
}

fn stats(data: &Path, common: &Common, tsv: &TsvArgs) -> CliResult {
    let mut cfg = load_config(common.config.as_deref(), Some(tsv))?;
    let ds = cfg.dataset(data)?;
    let out = begin(&mut cfg, common)?;
    let s = compute_stats(&ds)?;
    let json = serde_json::to_string_pretty(&s).map_err(runtime)?;
    print!("{s}");
    println!("{json}");
    if let Some(out) = out {
        write_file(&out.join("stats.json"), json)?;
    }
    Ok(())
}

fn load_valid(cfg: &RunConfig, valid: Option<&Path>) -> CliResult<Option<Dataset>> {
    valid.map(|p| cfg.dataset(p)).transpose()
}

fn train(arch: Arch, data: &Path, valid: Option<&Path>, common: &Common, tsv: &TsvArgs) -> CliResult {
    let mut cfg = load_config(common.config.as_deref(), Some(tsv))?;
    let out = require_out(common)?;
    let train = cfg.dataset(data)?;
    let valid = load_valid(&cfg, valid)?;
    begin(&mut cfg, common)?;
    let mut log = log_file(&out, TRAIN_LOG)?;
    let (model, report) = match arch {
        Arch::PointerLstm => {
            let mut m = PointerGenLstm::new(cfg.pointer_lstm.clone(), seq2seq_vocab(&train, &cfg)?)?;
            let r = train_seq2seq(&mut m, &train, valid.as_ref(), &cfg.train, None, Some(&mut log))?;
            (AnyModel::PointerLstm(m), report_json(&r))
        }
        Arch::MiniTransformer => {
            let mut m = MiniTransformer::new(cfg.mini_transformer.clone(), seq2seq_vocab(&train, &cfg)?)?;
            let r = train_seq2seq(&mut m, &train, valid.as_ref(), &cfg.train, None, Some(&mut log))?;
            (AnyModel::MiniTransformer(m), report_json(&r))
        }
        Arch::Tagger => {
            let pairs = train.content_target_pairs()?;
            let phrases = extract_phrases(&pairs).top(cfg.phrases_top_k);
            let (covered, uncovered): (Vec<_>, Vec<_>) =
                tag_pairs(&pairs, &phrases).into_iter().partition(|(_, t)| matches!(t, Tagged::Covered(_)));
            if !uncovered.is_empty() {
                eprintln!(
                    "skipping {} of {} pairs not covered by the top {} phrases",
                    uncovered.len(),
                    pairs.len(),
                    cfg.phrases_top_k
                );
            }
            let sents: Vec<Vec<String>> = pairs.into_iter().map(|(c, _)| c).collect();
            let vocab = Vocab::build(sents.iter().map(|s| s.as_slice()), cfg.vocab.max_size, cfg.vocab.min_count);
            let mut m = CrfTagger::new(cfg.tagger.clone(), vocab, phrases)?;
            let r = train_tagger(&mut m, &covered, valid.as_ref(), &cfg.train, Some(&mut log))?;
            let mut j = report_json(&r);
            j["uncovered_pairs"] = uncovered.len().into();
            (AnyModel::Tagger(m), j)
        }
    };
    finish_training(&out, &model, report)
}

fn pretrain(data: &Path, common: &Common, tsv: &TsvArgs) -> CliResult {
    let mut cfg = load_config(common.config.as_deref(), Some(tsv))?;
    let out = require_out(common)?;
    let ds = cfg.dataset(data)?;
    begin(&mut cfg, common)?;
    let pairs = ds.source_target_pairs()?;
    let corpus: Vec<Vec<String>> = pairs.into_iter().flat_map(|(s, t)| [s, t]).collect();
    let vocab = Vocab::build(corpus.iter().map(|s| s.as_slice()), cfg.vocab.max_size, cfg.vocab.min_count);
    let mut m = MiniTransformer::new(cfg.mini_transformer.clone(), vocab)?;
    let mut log = log_file(&out, TRAIN_LOG)?;
    let r = pretrain_denoising(&mut m, &corpus, cfg.noise, &cfg.train, Some(&mut log))?;
    finish_training(&out, &AnyModel::MiniTransformer(m), report_json(&r))
}

fn load_transformer(dir: &Path) -> CliResult<MiniTransformer> {
    existing(dir)?;
    match AnyModel::load(dir)? {
        AnyModel::MiniTransformer(m) => Ok(m),
        other => Err(CliError::Usage(format!(
            "{} holds a {:?} model, expected mini-transformer",
            dir.display(),
            arch_name(&other)
        ))),
    }
}

fn arch_name(m: &AnyModel) -> &'static str {
    match m {
        AnyModel::PointerLstm(_) => "pointer-lstm",
        AnyModel::MiniTransformer(_) => "mini-transformer",
        AnyModel::Tagger(_) => "tagger",
    }
}

fn finetune_copy(
    checkpoint: &Path,
    data: &Path,
    valid: Option<&Path>,
    lambda: Option<f64>,
    threshold: Option<f64>,
    common: &Common,
    tsv: &TsvArgs,
) -> CliResult {
    let mut cfg = load_config(common.config.as_deref(), Some(tsv))?;
    let out = require_out(common)?;
    if let Some(l) = lambda {
        cfg.copy.lambda = l;
    }
    if let Some(t) = threshold {
        cfg.copy.threshold = t;
    }
    let mut m = load_transformer(checkpoint)?;
    if m.copy_head().is_some() {
        return Err(CliError::Usage(format!("{} already has a copy head", checkpoint.display())));
    }
    let train = cfg.dataset(data)?;
    let valid = load_valid(&cfg, valid)?;
    begin(&mut cfg, common)?;
    let mut log = log_file(&out, TRAIN_LOG)?;
    let r = finetune_with_copy(&mut m, &train, valid.as_ref(), &cfg.train, &cfg.copy, Some(&mut log))?;
    let mut report = report_json(&r);
    if let Some(v) = &valid {
        let usage = copy_usage(&m, &v.source_target_pairs()?)?;
        report["valid_copy_usage"] = serde_json::to_value(usage).map_err(runtime)?;
    }
    finish_training(&out, &AnyModel::MiniTransformer(m), report)
}

struct SavedTeacher(AnyModel);

impl Teacher for SavedTeacher {
    fn teach(&self, u: &Utterance, strategy: DecodeStrategy, max_len: usize) -> rephrase::Result<Vec<String>> {
        match &self.0 {
            AnyModel::PointerLstm(m) => ModelTeacher(m).teach(u, strategy, max_len),
            AnyModel::MiniTransformer(m) => ModelTeacher(m).teach(u, strategy, max_len),
            AnyModel::Tagger(m) => m.rephrase(&u.content_surfaces()),
        }
    }
}

struct DistillOpts {
    student_config: Option<PathBuf>,
    student_arch: Arch,
    beam: Option<usize>,
    ft_gold: Option<bool>,
}

fn distill_cmd(
    teacher: &Path,
    data: &Path,
    valid: Option<&Path>,
    opts: DistillOpts,
    common: &Common,
    tsv: &TsvArgs,
) -> CliResult {
    if opts.student_config.is_some() && common.config.is_some() {
        return Err(CliError::Usage("give either --student-config or --config, not both".into()));
    }
    let config = opts.student_config.as_deref().or(common.config.as_deref());
    let mut cfg = load_config(config, Some(tsv))?;
    let out = require_out(common)?;
    match opts.beam {
        Some(0) => return Err(CliError::Usage("--beam must be at least 1".into())),
        Some(1) => cfg.distill.decode = DecodeStrategy::Greedy,
        Some(k) => cfg.distill.decode = DecodeStrategy::Beam(k),
        None => {}
    }
    if let Some(ft) = opts.ft_gold {
        cfg.distill.finetune_on_gold = ft;
    }
    existing(teacher)?;
    let teacher = SavedTeacher(AnyModel::load(teacher)?);
    let train = cfg.dataset(data)?;
    let valid = load_valid(&cfg, valid)?;
    begin(&mut cfg, common)?;
    let vocab = seq2seq_vocab(&train, &cfg)?;
    let mut log = log_file(&out, TRAIN_LOG)?;
    let (model, r) = match opts.student_arch {
        Arch::PointerLstm => {
            let mut m = PointerGenLstm::new(cfg.pointer_lstm.clone(), vocab)?;
            let r = distill(&teacher, &mut m, &train, valid.as_ref(), &cfg.distill, &cfg.train, None, Some(&mut log))?;
            (AnyModel::PointerLstm(m), r)
        }
        Arch::MiniTransformer => {
            let mut m = MiniTransformer::new(cfg.mini_transformer.clone(), vocab)?;
            let r = distill(&teacher, &mut m, &train, valid.as_ref(), &cfg.distill, &cfg.train, None, Some(&mut log))?;
            (AnyModel::MiniTransformer(m), r)
        }
        Arch::Tagger => return Err(CliError::Usage("the student must be a sequence-to-sequence model".into())),
    };
    let report = serde_json::json!({
        "pseudo_pairs": r.pseudo_pairs,
        "skipped": r.skipped,
        "distill": report_json(&r.distill_log),
        "gold": r.gold_log.as_ref().map(report_json),
    });
    finish_training(&out, &model, report)
}

fn gridsearch(data: &Path, valid: &Path, checkpoint: Option<&Path>, common: &Common, tsv: &TsvArgs) -> CliResult {
    let mut cfg = load_config(common.config.as_deref(), Some(tsv))?;
    let out = require_out(common)?;
    let train = cfg.dataset(data)?;
    let valid = cfg.dataset(valid)?;
    let base = match checkpoint {
        Some(dir) => load_transformer(dir)?,
        None => {
            cfg.resolve(common.seed)?;
            MiniTransformer::new(cfg.mini_transformer.clone(), seq2seq_vocab(&train, &cfg)?)?
        }
    };
    if base.copy_head().is_some() {
        return Err(CliError::Usage("the base transformer already has a copy head".into()));
    }
    begin(&mut cfg, common)?;
    let cell_cfg = TrainConfig { epochs: cfg.grid.epochs, ..cfg.train.clone() };
    let report = grid_search(&cfg.grid.spec(), |copy| {
        let mut m = base.clone();
        let r = finetune_with_copy(&mut m, &train, Some(&valid), &cell_cfg, copy, None)?;
        Ok(r.best_valid_em.unwrap_or(0.0))
    })?;
    write_file(&out.join("grid.csv"), report.to_csv())?;
    println!(
        "best lambda {} threshold {} valid EM {:.4}",
        report.best.lambda, report.best.threshold, report.best.valid_em
    );

    let best = CopyLossConfig { lambda: report.best.lambda, threshold: report.best.threshold, ..cfg.copy };
    let mut m = base;
    let mut log = log_file(&out, TRAIN_LOG)?;
    let r = finetune_with_copy(&mut m, &train, Some(&valid), &cfg.train, &best, Some(&mut log))?;
    let summary = serde_json::json!({
        "best_cell": report.best,
        "cells": report.cells.len(),
        "retrain": report_json(&r),
    });
    finish_training(&out, &AnyModel::MiniTransformer(m), summary)
}

fn predict(checkpoint: &Path, data: &Path, decode: Option<&str>, common: &Common, tsv: &TsvArgs) -> CliResult {
    let mut cfg = load_config(common.config.as_deref(), Some(tsv))?;
    if let Some(d) = decode {
        cfg.decode.strategy = d.parse()?;
    }
    existing(checkpoint)?;
    let model = AnyModel::load(checkpoint)?;
    let ds = cfg.dataset(data)?;
    let out = begin(&mut cfg, common)?;
    let preds = model.predict(&ds, cfg.decode.strategy, cfg.decode.max_len)?;
    let mut text = String::new();
    for (u, p) in ds.iter().zip(&preds) {
        text.push_str(&u.id);
        text.push('\t');
        text.push_str(&p.join(" "));
        text.push('\n');
    }
    match out {
        Some(out) => {
            let path = out.join(PREDICTIONS_FILE);
            write_file(&path, text)?;
            println!("wrote {} predictions to {}", preds.len(), path.display());
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(runtime)?,
    }
    Ok(())
}

/// Parses `id<TAB>space-joined tokens` lines.
pub fn parse_predictions(text: &str) -> CliResult<HashMap<String, Vec<String>>> {
    let mut preds = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, tokens) = line
            .split_once('\t')
            .ok_or_else(|| CliError::Usage(format!("predictions line {}: expected id<TAB>tokens", i + 1)))?;
        let tokens = tokens.split_whitespace().map(String::from).collect();
        if preds.insert(id.to_string(), tokens).is_some() {
            return Err(CliError::Usage(format!("predictions line {}: duplicate id {id}", i + 1)));
        }
    }
    Ok(preds)
}

fn eval(pred: &Path, data: &Path, common: &Common, tsv: &TsvArgs) -> CliResult {
    let mut cfg = load_config(common.config.as_deref(), Some(tsv))?;
    existing(pred)?;
    let text = fs::read_to_string(pred).map_err(runtime)?;
    let preds = parse_predictions(&text)?;
    let ds = cfg.dataset(data)?;
    let out = begin(&mut cfg, common)?;
    let report = corpus_eval(&preds, &ds, &cfg.metrics)?;
    let cer = copy_error_rate(&preds, &ds);
    println!("{report}");
    println!("copy_error_rate = {cer:.4}");
    if let Some(out) = out {
        let mut j = serde_json::to_value(&report).map_err(runtime)?;
        j["copy_error_rate"] = cer.into();
        write_file(&out.join("eval.json"), serde_json::to_string_pretty(&j).map_err(runtime)?)?;
    }
    Ok(())
}

fn phrases(data: &Path, top_k: usize, common: &Common, tsv: &TsvArgs) -> CliResult {
    if top_k == 0 {
        return Err(CliError::Usage("--top-k must be positive".into()));
    }
    let mut cfg = load_config(common.config.as_deref(), Some(tsv))?;
    let ds = cfg.dataset(data)?;
    let out = begin(&mut cfg, common)?;
    let pairs = ds.content_target_pairs()?;
    let vocab = extract_phrases(&pairs);
    let ks: BTreeSet<usize> =
        [1, 5, 10, 25, 50, 100, 250, 500, 1000].into_iter().filter(|&k| k < top_k).chain([top_k]).collect();
    let ks: Vec<usize> = ks.into_iter().collect();
    let curve = coverage_curve(&pairs, &vocab, &ks);
    println!("{} distinct phrases", vocab.len());
    println!("top_k\tcoverage");
    let mut csv = String::from("top_k,coverage\n");
    for (k, c) in &curve {
        println!("{k}\t{c:.4}");
        csv.push_str(&format!("{k},{c}\n"));
    }
    println!("coverage of top {top_k}: {:.4}", curve.last().map(|x| x.1).unwrap_or(0.0));
    if let Some(out) = out {
        vocab.top(top_k).save(&out.join("phrases.txt"))?;
        write_file(&out.join("coverage.csv"), csv)?;
    }
    Ok(())
}
