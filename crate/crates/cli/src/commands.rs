use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use adr_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use adr_core::encoding::{decode_spans, load_labeled, LabeledTweet, SpanLabel};
use adr_core::eval::{aggregate_trials, score_model, EvalReport, TrialResult};
use adr_core::gradcheck::{run_gradcheck, GradCheckConfig};
use adr_core::model::{AdrTagger, Phase};
use adr_core::pipeline::{
    encode_drug_examples, encode_tagged, load_drug_examples, load_unlabeled, prepare_labeled,
    preprocess_corpus, write_drug_examples,
};
use adr_core::text::{
    build_vocabulary_from, load_embeddings, preprocess, DrugContextExample, DrugLexicon,
    EmbeddingTable, Stopwords, VocabSource, Vocabulary,
};
use adr_core::training::{pretrain, train_supervised, EncodedTaggedExample, TrainingLog};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::failure::Failure;

type Outcome = Result<(), Failure>;

fn ensure_dir(path: &Path) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::data(format!("cannot create {}: {e}", parent.display())))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Outcome {
    ensure_dir(path)?;
    fs::write(path, contents).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn write_log(path: &Path, log: &TrainingLog) -> Outcome {
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
    write_file(path, &buf)
}

fn stopwords(cfg: &RunConfig) -> Result<Stopwords, Failure> {
    match &cfg.paths.stopwords {
        Some(p) => Ok(Stopwords::load(p)?),
        None => Ok(Stopwords::english()),
    }
}

fn lexicon(cfg: &RunConfig) -> Result<DrugLexicon, Failure> {
    let lex = DrugLexicon::load(cfg.require(&cfg.paths.lexicon, "lexicon")?)?;
    if lex.is_empty() {
        return Err(Failure::data("drug lexicon is empty"));
    }
    Ok(lex)
}

/// Labeled tweets after the same token normalization the corpus gets.
fn labeled(path: &Path, stop: &Stopwords) -> Result<Vec<LabeledTweet>, Failure> {
    let tweets: Vec<LabeledTweet> = load_labeled(path)?.iter().map(|t| prepare_labeled(t, stop)).collect();
    if tweets.iter().all(|t| t.tokens.is_empty()) {
        return Err(Failure::data(format!("{}: no labeled tweets", path.display())));
    }
    Ok(tweets)
}

fn masked_corpus(cfg: &RunConfig, lex: &DrugLexicon) -> Result<Vec<DrugContextExample>, Failure> {
    let path = cfg.masked_path();
    if !path.exists() {
        return Err(Failure::data(format!(
            "{} not found; run `adr preprocess` first or set paths.masked",
            path.display()
        )));
    }
    Ok(load_drug_examples(&path, lex)?)
}

fn warn_truncation(lengths: impl Iterator<Item = usize>, max_len: usize, what: &str) {
    let long = lengths.filter(|&n| n > max_len).count();
    if long > 0 {
        log::warn!("{long} {what} longer than {max_len} tokens will be truncated");
    }
}

fn build_vocab(cfg: &RunConfig) -> Result<Vocabulary, Failure> {
    let stop = stopwords(cfg)?;
    let labeled_tokens: Vec<Vec<String>> = match &cfg.paths.train {
        Some(p) => labeled(p, &stop)?.into_iter().map(|t| t.tokens).collect(),
        None if cfg.ablation.vocab_source == VocabSource::LabeledOnly => {
            return Err(Failure::usage("a labeled-only vocabulary needs paths.train"))
        }
        None => Vec::new(),
    };
    let unlabeled_tokens: Vec<Vec<String>> = match cfg.ablation.vocab_source {
        VocabSource::Both => masked_corpus(cfg, &lexicon(cfg)?)?
            .into_iter()
            .map(|ex| ex.tweet.tokens)
            .collect(),
        VocabSource::LabeledOnly => Vec::new(),
    };
    Ok(build_vocabulary_from(
        &labeled_tokens,
        &unlabeled_tokens,
        cfg.ablation.vocab_source,
        cfg.model.vocab_cap,
    )?)
}

/// The saved vocabulary, or a freshly built one (also saved) when none exists.
fn vocabulary(cfg: &RunConfig) -> Result<Vocabulary, Failure> {
    let path = cfg.vocab_path();
    if path.exists() {
        return Ok(Vocabulary::load(&path)?);
    }
    log::info!("{} not found, building the vocabulary", path.display());
    let vocab = build_vocab(cfg)?;
    ensure_dir(&path)?;
    vocab.save(&path)?;
    Ok(vocab)
}

fn embeddings(cfg: &RunConfig, vocab: &Vocabulary, seed: u64) -> Result<EmbeddingTable, Failure> {
    match &cfg.paths.embeddings {
        Some(path) => {
            let table = load_embeddings(path, vocab, seed)?;
            if table.dim() != cfg.model.embed_dim {
                return Err(Failure::usage(format!(
                    "{} has {}-dimensional vectors but model.embed_dim is {}",
                    path.display(),
                    table.dim(),
                    cfg.model.embed_dim
                )));
            }
            log::info!("embedding coverage {:.3}", table.coverage);
            Ok(table)
        }
        None => {
            log::warn!("no paths.embeddings given; using random embeddings");
            Ok(EmbeddingTable::random(vocab.len(), cfg.model.embed_dim, seed))
        }
    }
}

fn fresh_checkpoint(cfg: &RunConfig, seed: u64) -> Result<Checkpoint, Failure> {
    let lex = lexicon(cfg)?;
    let vocab = vocabulary(cfg)?;
    let table = embeddings(cfg, &vocab, seed)?;
    let model = AdrTagger::with_embeddings(cfg.model_config(vocab.len(), lex.len()), table.matrix, seed)?;
    Ok(Checkpoint {
        model,
        vocab,
        drugs: lex.names().to_vec(),
    })
}

fn load_compatible(cfg: &RunConfig, path: &Path) -> Result<Checkpoint, Failure> {
    let ckpt = load_checkpoint(path)?;
    ckpt.expect_dims(cfg.model.embed_dim, cfg.model.hidden)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(ckpt)
}

fn start_checkpoint(cfg: &RunConfig, seed: u64) -> Result<Checkpoint, Failure> {
    match &cfg.paths.pretrained {
        Some(p) => {
            let mut ckpt = load_compatible(cfg, p)?;
            ckpt.model.seed = seed;
            Ok(ckpt)
        }
        None => fresh_checkpoint(cfg, seed),
    }
}

pub fn preprocess_cmd(cfg: &RunConfig) -> Outcome {
    let corpus_path = cfg.require(&cfg.paths.unlabeled, "unlabeled")?;
    let tweets = load_unlabeled(corpus_path)?;
    if tweets.is_empty() {
        return Err(Failure::data(format!("{}: no tweets", corpus_path.display())));
    }
    let lex = lexicon(cfg)?;
    let (examples, counts) = preprocess_corpus(&tweets, &lex, &stopwords(cfg)?, cfg.ablation.mask_drugs);
    println!("kept\t{}", counts.kept);
    println!("rejected_no_drug\t{}", counts.rejected_no_drug);
    println!("rejected_multi_drug\t{}", counts.rejected_multi_drug);
    println!("dropped_empty\t{}", counts.dropped_empty);
    if counts.kept == 0 {
        return Err(Failure::data("no tweet kept after preprocessing"));
    }
    let out = cfg.masked_path();
    write_file(&out, write_drug_examples(&examples, &lex).as_bytes())?;
    log::info!("wrote {} examples to {}", examples.len(), out.display());
    Ok(())
}

pub fn build_vocab_cmd(cfg: &RunConfig) -> Outcome {
    let vocab = build_vocab(cfg)?;
    let path = cfg.vocab_path();
    ensure_dir(&path)?;
    vocab.save(&path)?;
    println!("vocabulary\t{}\t{}", vocab.len(), path.display());
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig) -> Outcome {
    let mut ckpt = fresh_checkpoint(cfg, cfg.seed)?;
    let lex = DrugLexicon::new(ckpt.drugs.iter());
    let corpus = encode_drug_examples(&masked_corpus(cfg, &lex)?, &ckpt.vocab);
    let train_cfg = cfg.train_config(Phase::Pretrain, cfg.seed);
    warn_truncation(corpus.iter().map(|e| e.tokens.len()), train_cfg.max_len, "pretraining tweets");
    log::info!("pretraining on {} examples, {} drugs", corpus.len(), lex.len());
    let log = pretrain(&mut ckpt.model, &corpus, &train_cfg)?;
    write_log(&cfg.in_checkpoint_dir("pretrain_log.jsonl"), &log)?;
    let out = cfg.in_checkpoint_dir("pretrained.ckpt");
    ensure_dir(&out)?;
    save_checkpoint(&ckpt, &out)?;
    if let Some(last) = log.last() {
        println!("epochs\t{}", last.epoch);
        println!("mean_loss\t{:.6}", last.mean_loss);
        if let Some(acc) = last.accuracy {
            println!("held_out_accuracy\t{acc:.4}");
        }
    }
    println!("checkpoint\t{}", out.display());
    Ok(())
}

fn encoded_split(path: &Path, stop: &Stopwords, vocab: &Vocabulary) -> Result<Vec<EncodedTaggedExample>, Failure> {
    Ok(encode_tagged(&labeled(path, stop)?, vocab))
}

pub fn train_cmd(cfg: &RunConfig) -> Outcome {
    let stop = stopwords(cfg)?;
    let mut ckpt = start_checkpoint(cfg, cfg.seed)?;
    let train = encoded_split(cfg.require(&cfg.paths.train, "train")?, &stop, &ckpt.vocab)?;
    log::info!("training tweets: {}", train.len());
    println!("train_tweets\t{}", train.len());
    if let Some(test) = &cfg.paths.test {
        let n = load_labeled(test)?.len();
        log::info!("test tweets: {n}");
        println!("test_tweets\t{n}");
    }
    let train_cfg = cfg.train_config(Phase::Supervised, cfg.seed);
    warn_truncation(train.iter().map(|e| e.tokens.len()), train_cfg.max_len, "training tweets");
    let log = train_supervised(&mut ckpt.model, &train, &train_cfg)?;
    write_log(&cfg.in_checkpoint_dir("train_log.jsonl"), &log)?;
    let out = cfg.in_checkpoint_dir("supervised.ckpt");
    ensure_dir(&out)?;
    save_checkpoint(&ckpt, &out)?;
    if let Some(last) = log.last() {
        println!("mean_loss\t{:.6}", last.mean_loss);
        if let Some(acc) = last.accuracy {
            println!("train_token_accuracy\t{acc:.4}");
        }
    }
    println!("checkpoint\t{}", out.display());
    Ok(())
}

fn run_trial(cfg: &RunConfig, seed: u64, test_path: &Path, stop: &Stopwords) -> Result<TrialResult, Failure> {
    let mut ckpt = start_checkpoint(cfg, seed)?;
    let train = encoded_split(cfg.require(&cfg.paths.train, "train")?, stop, &ckpt.vocab)?;
    let test = encoded_split(test_path, stop, &ckpt.vocab)?;
    let train_cfg = cfg.train_config(Phase::Supervised, seed);
    train_supervised(&mut ckpt.model, &train, &train_cfg)?;
    let counts = score_model(&ckpt.model, &test, train_cfg.max_len, cfg.include_indication)?;
    log::info!("trial seed {seed}: {counts:?}");
    Ok(TrialResult::new(seed, counts))
}

pub struct EvaluateArgs {
    pub checkpoint: Option<PathBuf>,
    pub parallel_trials: usize,
    pub report: Option<PathBuf>,
}

pub fn evaluate_cmd(cfg: &RunConfig, args: &EvaluateArgs) -> Outcome {
    let stop = stopwords(cfg)?;
    let test_path = cfg.require(&cfg.paths.test, "test")?;
    let report: EvalReport = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_compatible(cfg, path)?;
            let test = encoded_split(test_path, &stop, &ckpt.vocab)?;
            let counts = score_model(&ckpt.model, &test, cfg.supervised.max_len, cfg.include_indication)?;
            aggregate_trials(&[TrialResult::new(ckpt.model.seed, counts)])?
        }
        None => {
            let seeds: Vec<u64> = (0..cfg.trials as u64).map(|i| cfg.seed + i).collect();
            let trials: Vec<TrialResult> = if args.parallel_trials > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(args.parallel_trials)
                    .build()
                    .map_err(|e| Failure::usage(format!("cannot start {} workers: {e}", args.parallel_trials)))?;
                pool.install(|| {
                    seeds
                        .par_iter()
                        .map(|&s| run_trial(cfg, s, test_path, &stop))
                        .collect::<Result<_, _>>()
                })?
            } else {
                seeds
                    .iter()
                    .map(|&s| run_trial(cfg, s, test_path, &stop))
                    .collect::<Result<_, _>>()?
            };
            aggregate_trials(&trials)?
        }
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = &args.report {
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

pub fn predict_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, text: Option<&str>) -> Outcome {
    let default_path = cfg.in_checkpoint_dir("supervised.ckpt");
    let ckpt = load_checkpoint(checkpoint.unwrap_or(&default_path))?;
    let stop = stopwords(cfg)?;
    let lines: Vec<String> = match text {
        Some(t) => vec![t.to_string()],
        None => std::io::stdin()
            .lock()
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::data(format!("cannot read stdin: {e}")))?,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, raw) in lines.iter().enumerate() {
        let Some(tweet) = preprocess(&format!("input{}", i + 1), raw, &stop) else {
            log::warn!("input {} is empty after preprocessing", i + 1);
            continue;
        };
        let max_len = cfg.supervised.max_len;
        let tokens = &tweet.tokens[..tweet.tokens.len().min(max_len)];
        let tags = ckpt.model.predict_tags(&ckpt.vocab.encode(tokens))?;
        let mut buf = String::new();
        for (tok, tag) in tokens.iter().zip(&tags) {
            buf.push_str(&format!("{tok}\t{tag}\n"));
        }
        for span in decode_spans(&tags) {
            if span.label == SpanLabel::Adr || cfg.include_indication {
                let label = if span.label == SpanLabel::Adr { "ADR" } else { "Indication" };
                buf.push_str(&format!(
                    "span\t{}\t{}\t{label}\t{}\n",
                    span.start,
                    span.end,
                    tokens[span.start..span.end].join(" ")
                ));
            }
        }
        buf.push('\n');
        out.write_all(buf.as_bytes())
            .map_err(|e| Failure::data(format!("cannot write output: {e}")))?;
    }
    Ok(())
}

pub fn gradcheck_cmd(config: &GradCheckConfig) -> Outcome {
    let started = std::time::Instant::now();
    let report = run_gradcheck(config)?;
    let worst = report.worst().expect("at least one parameter is checked");
    println!(
        "checked\t{} gradients\t{} seeds\tE={} H={} T={} D={}",
        report.checks.len(),
        config.seeds,
        config.embed_dim,
        config.hidden,
        config.seq_len,
        config.drug_classes
    );
    println!(
        "worst\t{:.3e}\t{} ({} head, seed {})",
        worst.max_rel_error, worst.parameter, worst.objective, worst.seed
    );
    println!("elapsed\t{:.2}s", started.elapsed().as_secs_f64());
    let failures: Vec<_> = report.failures().collect();
    if failures.is_empty() {
        println!("PASS\trelative error < {:e}", config.tolerance);
        return Ok(());
    }
    for f in &failures {
        println!("FAIL\t{}\t{} head\tseed {}\t{:.3e}", f.parameter, f.objective, f.seed, f.max_rel_error);
    }
    Err(Failure::Numerical(format!(
        "{} of {} gradient checks exceeded tolerance {:e}",
        failures.len(),
        report.checks.len(),
        config.tolerance
    )))
}
