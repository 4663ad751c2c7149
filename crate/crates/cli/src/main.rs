//! `adr`: preprocessing, pretraining, supervised training, evaluation and
//! prediction for the ADR mention tagger.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use adr_core::gradcheck::GradCheckConfig;
use clap::{Args, Parser, Subcommand};

use crate::commands::EvaluateArgs;
use crate::config::{parse_overrides, RunConfig, CHECKPOINT_DIR_ENV};
use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "adr", version, about = "Semi-supervised BiLSTM tagger for adverse drug reaction mentions")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize the unlabeled corpus and mask drug mentions.
    Preprocess(RunArgs),
    /// Build the vocabulary from labeled (and by default unlabeled) tweets.
    BuildVocab(RunArgs),
    /// Pretrain the encoder to predict masked drug names.
    Pretrain(RunArgs),
    /// Train the tagger on labeled tweets, optionally from a pretrained checkpoint.
    Train(RunArgs),
    /// Score a checkpoint, or run seeded train+evaluate trials and aggregate.
    Evaluate(RunArgs),
    /// Tag raw text with a trained checkpoint.
    Predict(RunArgs),
    /// Compare analytic gradients with finite differences on tiny models.
    Gradcheck(GradcheckArgs),
}

/// Shared by every data command. Any config key can be overridden with
/// `--section.key value`, e.g. `--model.hidden 64 --supervised.epochs 2`.
#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Keep drug names instead of masking them (same as --ablation.mask_drugs false).
    #[arg(long)]
    no_drug_mask: bool,
    /// Build the vocabulary from labeled tweets only.
    #[arg(long)]
    vocab_labeled_only: bool,
    /// Start from this pretrained checkpoint (same as --paths.pretrained).
    #[arg(long, value_name = "PATH")]
    pretrained: Option<PathBuf>,
    /// Checkpoint to evaluate or predict with.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Run this many evaluation trials concurrently.
    #[arg(long, value_name = "N", default_value_t = 1)]
    parallel_trials: usize,
    /// Also write the evaluation report here.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Text to tag; without it `predict` reads one tweet per line from stdin.
    #[arg(long)]
    text: Option<String>,
    /// Config overrides: `--section.key value` or `--section.key=value`.
    #[arg(allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    embed_dim: usize,
    #[arg(long, default_value_t = 7)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    seq_len: usize,
    #[arg(long, default_value_t = 3)]
    drug_classes: usize,
    #[arg(long, default_value_t = 10)]
    vocab_size: usize,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-5, allow_negative_numbers = true)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Flip the sign of one parameter's analytic gradient (test fixture).
    #[arg(long, hide = true, value_name = "PARAM")]
    flip_sign_of: Option<String>,
}

fn take_switch(args: &mut Vec<String>, name: &str) -> bool {
    let flag = format!("--{name}");
    let before = args.len();
    args.retain(|a| *a != flag);
    args.len() != before
}

fn take_value(args: &mut Vec<String>, name: &str) -> Result<Option<String>, Failure> {
    let flag = format!("--{name}");
    let prefix = format!("--{name}=");
    let Some(i) = args.iter().position(|a| *a == flag || a.starts_with(&prefix)) else {
        return Ok(None);
    };
    let arg = args.remove(i);
    if let Some(v) = arg.strip_prefix(&prefix) {
        return Ok(Some(v.to_string()));
    }
    if i < args.len() {
        Ok(Some(args.remove(i)))
    } else {
        Err(Failure::usage(format!("{flag} needs a value")))
    }
}

impl RunArgs {
    /// Clap hands every argument after the first override to `overrides`,
    /// so named flags written late are picked out here.
    fn absorb_late_flags(&mut self) -> Result<(), Failure> {
        let o = &mut self.overrides;
        self.no_drug_mask |= take_switch(o, "no-drug-mask");
        self.vocab_labeled_only |= take_switch(o, "vocab-labeled-only");
        for (name, slot) in [
            ("config", &mut self.config),
            ("pretrained", &mut self.pretrained),
            ("checkpoint", &mut self.checkpoint),
            ("report", &mut self.report),
        ] {
            if let Some(v) = take_value(o, name)? {
                *slot = Some(PathBuf::from(v));
            }
        }
        if let Some(v) = take_value(o, "text")? {
            self.text = Some(v);
        }
        if let Some(v) = take_value(o, "parallel-trials")? {
            self.parallel_trials = v
                .parse()
                .map_err(|_| Failure::usage(format!("--parallel-trials expects a count, got {v:?}")))?;
        }
        Ok(())
    }

    fn load_config(&mut self) -> Result<RunConfig, Failure> {
        self.absorb_late_flags()?;
        let mut overrides = parse_overrides(&self.overrides)?;
        if self.no_drug_mask {
            overrides.push(("ablation.mask_drugs".into(), "false".into()));
        }
        if self.vocab_labeled_only {
            overrides.push(("ablation.vocab_source".into(), "labeled_only".into()));
        }
        if let Some(p) = &self.pretrained {
            overrides.push(("paths.pretrained".into(), p.to_string_lossy().into_owned()));
        }
        if self.parallel_trials == 0 {
            return Err(Failure::usage("--parallel-trials must be at least 1"));
        }
        RunConfig::load(
            self.config.as_deref(),
            std::env::var(CHECKPOINT_DIR_ENV).ok(),
            &overrides,
        )
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Preprocess(mut a) => commands::preprocess_cmd(&a.load_config()?),
        Command::BuildVocab(mut a) => commands::build_vocab_cmd(&a.load_config()?),
        Command::Pretrain(mut a) => commands::pretrain_cmd(&a.load_config()?),
        Command::Train(mut a) => commands::train_cmd(&a.load_config()?),
        Command::Evaluate(mut a) => {
            let cfg = a.load_config()?;
            commands::evaluate_cmd(
                &cfg,
                &EvaluateArgs {
                    checkpoint: a.checkpoint,
                    parallel_trials: a.parallel_trials,
                    report: a.report,
                },
            )
        }
        Command::Predict(mut a) => {
            let cfg = a.load_config()?;
            commands::predict_cmd(&cfg, a.checkpoint.as_deref(), a.text.as_deref())
        }
        Command::Gradcheck(a) => commands::gradcheck_cmd(&GradCheckConfig {
            embed_dim: a.embed_dim,
            hidden: a.hidden,
            seq_len: a.seq_len,
            drug_classes: a.drug_classes,
            vocab_size: a.vocab_size,
            seeds: a.seeds,
            epsilon: a.epsilon,
            tolerance: a.tolerance,
            flip_sign_of: a.flip_sign_of,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
