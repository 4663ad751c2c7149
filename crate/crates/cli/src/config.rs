//! Run configuration: built-in defaults, then the TOML file, then the
//! checkpoint-directory environment variable, then `--key value` overrides.

use std::path::{Path, PathBuf};

use adr_core::model::{ModelConfig, Phase};
use adr_core::text::{DEFAULT_EMBED_DIM, DEFAULT_VOCAB_CAP};
use adr_core::{AdamConfig, Pooling, TrainConfig, VocabSource};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::failure::Failure;

pub const CHECKPOINT_DIR_ENV: &str = "ADR_CHECKPOINT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    /// Score indication spans as well as ADR spans.
    pub include_indication: bool,
    pub paths: Paths,
    pub model: ModelSection,
    pub pretrain: PhaseSection,
    pub supervised: PhaseSection,
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub unlabeled: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Output of `preprocess`, input of `pretrain`.
    pub masked: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Checkpoint to fine-tune from in `train` and multi-trial `evaluate`.
    pub pretrained: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden: usize,
    pub vocab_cap: usize,
    pub train_embeddings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub mask_drugs: bool,
    pub vocab_source: VocabSource,
    pub pooling: Pooling,
    pub gate_biases: bool,
}

impl PhaseSection {
    fn from_train(cfg: TrainConfig) -> Self {
        PhaseSection {
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            max_len: cfg.max_len,
            learning_rate: cfg.adam.learning_rate,
            beta1: cfg.adam.beta1,
            beta2: cfg.adam.beta2,
            epsilon: cfg.adam.epsilon,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            trials: 10,
            include_indication: false,
            paths: Paths {
                unlabeled: None,
                lexicon: None,
                stopwords: None,
                embeddings: None,
                train: None,
                test: None,
                masked: None,
                vocab: None,
                pretrained: None,
                checkpoint_dir: PathBuf::from("checkpoints"),
            },
            model: ModelSection {
                embed_dim: DEFAULT_EMBED_DIM,
                hidden: adr_core::model::DEFAULT_HIDDEN,
                vocab_cap: DEFAULT_VOCAB_CAP,
                train_embeddings: false,
            },
            pretrain: PhaseSection::from_train(TrainConfig::pretrain(0)),
            supervised: PhaseSection::from_train(TrainConfig::supervised(0)),
            ablation: Ablation {
                mask_drugs: true,
                vocab_source: VocabSource::Both,
                pooling: Pooling::Mean,
                gate_biases: true,
            },
        }
    }
}

impl RunConfig {
    /// Loads `file` (if any) over the defaults, applies the environment
    /// and the overrides, and validates the result.
    pub fn load(
        file: Option<&Path>,
        env_checkpoint_dir: Option<String>,
        overrides: &[(String, String)],
    ) -> Result<Self, Failure> {
        let mut root = match Value::try_from(RunConfig::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("defaults serialize to a table"),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            let mut parsed: Table = text
                .parse()
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new(""));
            if let Some(Value::Table(paths)) = parsed.get_mut("paths") {
                for (_, value) in paths.iter_mut() {
                    if let Value::String(s) = value {
                        if Path::new(s.as_str()).is_relative() {
                            let joined = base.join(s.as_str()).to_string_lossy().into_owned();
                            *s = joined;
                        }
                    }
                }
            }
            merge(&mut root, parsed);
        }
        if let Some(dir) = env_checkpoint_dir.filter(|d| !d.is_empty()) {
            set_key(&mut root, "paths.checkpoint_dir", Value::String(dir))?;
        }
        for (key, raw) in overrides {
            set_key(&mut root, key, parse_scalar(raw))?;
        }
        let config: RunConfig = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Failure::usage(format!("invalid configuration: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.trials == 0 {
            return Err(Failure::usage("trials must be at least 1"));
        }
        if self.model.embed_dim == 0 || self.model.hidden == 0 || self.model.vocab_cap == 0 {
            return Err(Failure::usage("model.embed_dim, model.hidden and model.vocab_cap must be positive"));
        }
        for (name, phase) in [("pretrain", &self.pretrain), ("supervised", &self.supervised)] {
            if phase.epochs == 0 {
                return Err(Failure::usage(format!("{name}.epochs must be at least 1")));
            }
            self.train_config(if name == "pretrain" { Phase::Pretrain } else { Phase::Supervised }, 0)
                .validate()
                .map_err(|e| Failure::usage(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn train_config(&self, phase: Phase, seed: u64) -> TrainConfig {
        let s = match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::Supervised => &self.supervised,
        };
        TrainConfig {
            phase,
            batch_size: s.batch_size,
            epochs: s.epochs,
            max_len: s.max_len,
            seed,
            adam: AdamConfig {
                learning_rate: s.learning_rate,
                beta1: s.beta1,
                beta2: s.beta2,
                epsilon: s.epsilon,
            },
        }
    }

    pub fn model_config(&self, vocab_size: usize, drug_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            hidden: self.model.hidden,
            drug_classes,
            gate_biases: self.ablation.gate_biases,
            pooling: self.ablation.pooling,
            train_embeddings: self.model.train_embeddings,
        }
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
        path.as_deref()
            .ok_or_else(|| Failure::usage(format!("paths.{key} is not set (config file or --paths.{key})")))
    }

    pub fn in_checkpoint_dir(&self, name: &str) -> PathBuf {
        self.paths.checkpoint_dir.join(name)
    }

    pub fn masked_path(&self) -> PathBuf {
        self.paths
            .masked
            .clone()
            .unwrap_or_else(|| self.in_checkpoint_dir("masked.tsv"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.paths
            .vocab
            .clone()
            .unwrap_or_else(|| self.in_checkpoint_dir("vocab.txt"))
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Override values are read as TOML scalars (`3`, `0.5`, `true`), falling
/// back to a bare string (`sum`, `data/train.tsv`).
pub fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !matches!(v, Value::Table(_)))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(root: &mut Table, key: &str, value: Value) -> Result<(), Failure> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for section in sections {
        table = match table.get_mut(*section) {
            Some(Value::Table(t)) => t,
            _ => return Err(Failure::usage(format!("unknown config key --{key}"))),
        };
    }
    if matches!(table.get(*last), Some(Value::Table(_))) {
        return Err(Failure::usage(format!("--{key} names a section, not a key")));
    }
    // Paths default to absent, so they are the only keys that may be new.
    let known = table.contains_key(*last) || sections == ["paths"];
    if !known {
        return Err(Failure::usage(format!("unknown config key --{key}")));
    }
    let value = match (table.get(*last), value) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
        (Some(Value::String(_)), v) | (None, v) if sections == ["paths"] => Value::String(scalar_text(&v)),
        (_, v) => v,
    };
    table.insert(last.to_string(), value);
    Ok(())
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Splits `--key value` / `--key=value` pairs. Dashes inside key names are
/// read as underscores so `--model.embed-dim` also works.
pub fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            return Err(Failure::usage(format!("unexpected argument {arg:?}; overrides look like --section.key value")));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::usage(format!("--{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}
