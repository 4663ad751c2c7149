//! Adam, batching, and the two training phases.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::TagLabel;
use crate::error::{Error, Result};
use crate::model::{AdrTagger, Objective, Phase};
use crate::numerics::Parameter;
use crate::text::PAD_INDEX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// One Adam update of `param` at step `t` (1-based). The gradient is zeroed
/// afterwards.
pub fn adam_step(name: &str, param: &mut Parameter, config: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::usage("Adam step index starts at 1"));
    }
    if let Some(k) = param.grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            location: format!("{name} entry {k}"),
        });
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = *config;
    let bc1 = 1.0 - beta1.powf(t as f64);
    let bc2 = 1.0 - beta2.powf(t as f64);
    let Parameter {
        value,
        grad,
        adam_m,
        adam_v,
    } = param;
    for (((w, g), m), v) in value
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(adam_m.as_mut_slice())
        .zip(adam_v.as_mut_slice())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    grad.fill(0.0);
    Ok(())
}

/// Optimizer state: hyperparameters plus the shared step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0 }
    }

    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Parameter)>,
    {
        self.t += 1;
        for (name, p) in params {
            adam_step(&name, p, &self.config, self.t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    /// One row per example, each `max_len` long.
    pub indices: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn valid(&self, row: usize) -> &[usize] {
        &self.indices[row][..self.lengths[row]]
    }
}

/// Truncates or PAD-fills every sequence to `max_len`.
pub fn pad_batch(examples: &[&[usize]], max_len: usize) -> Result<PaddedBatch> {
    if max_len == 0 {
        return Err(Error::usage("max sequence length must be at least 1"));
    }
    let mut indices = Vec::with_capacity(examples.len());
    let mut lengths = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        if ex.is_empty() {
            return Err(Error::usage(format!("example {i} in batch is empty")));
        }
        let len = ex.len().min(max_len);
        let mut row = ex[..len].to_vec();
        row.resize(max_len, PAD_INDEX);
        indices.push(row);
        lengths.push(len);
    }
    Ok(PaddedBatch { indices, lengths })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            batch_size: 128,
            epochs: 30,
            max_len: 40,
            seed,
            adam: AdamConfig::default(),
        }
    }

    pub fn supervised(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Supervised,
            batch_size: 1,
            epochs: 5,
            max_len: 40,
            seed,
            adam: AdamConfig::default(),
        }
    }

    /// `epochs == 0` is accepted and trains nothing.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::usage("max sequence length must be at least 1"));
        }
        self.adam.validate()
    }
}

/// A pretraining example after vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDrugExample {
    pub id: String,
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// A labeled tweet after vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTaggedExample {
    pub id: String,
    pub tokens: Vec<usize>,
    pub tags: Vec<TagLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub wall_time: f64,
}

/// Per-epoch records. Epoch 0 is measured before any update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Pretraining examples land in the held-out tenth when their id hashes to 0 mod 10.
pub fn is_held_out(id: &str) -> bool {
    fnv1a(id.as_bytes()).is_multiple_of(10)
}

fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let salt = match phase {
        Phase::Pretrain => 0x5052_4554,
        Phase::Supervised => 0x5355_5056,
    };
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

fn truncated(tokens: &[usize], max_len: usize) -> &[usize] {
    &tokens[..tokens.len().min(max_len)]
}

fn drug_accuracy(model: &AdrTagger, examples: &[&EncodedDrugExample], max_len: usize) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for ex in examples {
        if model.predict_drug(truncated(&ex.tokens, max_len))? == ex.label {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / examples.len() as f64))
}

/// A training example: token indices plus the objective for its first `len` tokens.
trait TrainingExample {
    fn tokens(&self) -> &[usize];
    fn objective(&self, len: usize) -> Objective<'_>;
}

impl TrainingExample for EncodedDrugExample {
    fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    fn objective(&self, _len: usize) -> Objective<'_> {
        Objective::Drug(self.label)
    }
}

impl TrainingExample for EncodedTaggedExample {
    fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    fn objective(&self, len: usize) -> Objective<'_> {
        Objective::Tags(&self.tags[..len])
    }
}

/// Shared mini-batch loop for both phases.
fn run_epochs<T, A>(model: &mut AdrTagger, data: &[&T], config: &TrainConfig, mut accuracy: A) -> Result<TrainingLog>
where
    T: TrainingExample,
    A: FnMut(&AdrTagger) -> Result<Option<f64>>,
{
    let started = Instant::now();
    let max_len = config.max_len;
    let long = data.iter().filter(|ex| ex.tokens().len() > max_len).count();
    if long > 0 {
        log::warn!("{long} sequences longer than {max_len} tokens will be truncated");
    }

    let mut log = TrainingLog::default();
    let mut initial = 0.0;
    for ex in data {
        let tokens = truncated(ex.tokens(), max_len);
        initial += model.loss(tokens, ex.objective(tokens.len()))?;
    }
    log.records.push(EpochRecord {
        phase: config.phase,
        epoch: 0,
        mean_loss: initial / data.len() as f64,
        accuracy: accuracy(model)?,
        wall_time: started.elapsed().as_secs_f64(),
    });

    for (_, p) in model.phase_parameters_mut(config.phase) {
        p.reset_moments();
    }
    let mut adam = Adam::new(config.adam);
    let mut rng = phase_rng(config.seed, config.phase);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let rows: Vec<&[usize]> = batch.iter().map(|&i| data[i].tokens()).collect();
            let padded = pad_batch(&rows, max_len)?;
            model.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let tokens = padded.valid(r);
                total += model.forward(tokens, data[i].objective(tokens.len()))?;
                model.backward(scale)?;
            }
            adam.step(model.phase_parameters_mut(config.phase))?;
        }
        let mean_loss = total / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss",
                location: format!("{:?} epoch {epoch}", config.phase),
            });
        }
        log.records.push(EpochRecord {
            phase: config.phase,
            epoch,
            mean_loss,
            accuracy: accuracy(model)?,
            wall_time: started.elapsed().as_secs_f64(),
        });
        log::info!("{:?} epoch {epoch}: loss {mean_loss:.5}", config.phase);
    }
    model.zero_grad();
    Ok(log)
}

/// Drug-name prediction from masked context. Examples whose id hashes into
/// the held-out tenth are only used for the accuracy column of the log.
pub fn pretrain(model: &mut AdrTagger, corpus: &[EncodedDrugExample], config: &TrainConfig) -> Result<TrainingLog> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::usage("pretraining corpus is empty"));
    }
    let d = model.config.drug_classes;
    if let Some(ex) = corpus.iter().find(|ex| ex.label >= d || ex.tokens.is_empty()) {
        return Err(Error::usage(format!(
            "pretraining example {} has label {} (catalog {d}) and {} tokens",
            ex.id,
            ex.label,
            ex.tokens.len()
        )));
    }
    let first = corpus[0].label;
    if corpus.iter().all(|ex| ex.label == first) {
        return Err(Error::usage("pretraining needs at least two distinct drugs in the corpus"));
    }
    let (held_out, train): (Vec<&EncodedDrugExample>, Vec<&EncodedDrugExample>) =
        corpus.iter().partition(|ex| is_held_out(&ex.id));
    if train.is_empty() {
        return Err(Error::usage("every pretraining example fell into the held-out split"));
    }
    let max_len = config.max_len;
    run_epochs(model, &train, config, |m| drug_accuracy(m, &held_out, max_len))
}

/// Fraction of non-PAD positions whose argmax tag equals the gold tag.
pub fn token_accuracy(model: &AdrTagger, data: &[EncodedTaggedExample], max_len: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in data {
        let tokens = truncated(&ex.tokens, max_len);
        let pred = model.predict_tags(tokens)?;
        for (p, g) in pred.iter().zip(&ex.tags) {
            if *g != TagLabel::Pad {
                total += 1;
                hits += usize::from(p == g);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Supervised tagging on the same encoder the pretraining phase used.
pub fn train_supervised(
    model: &mut AdrTagger,
    data: &[EncodedTaggedExample],
    config: &TrainConfig,
) -> Result<TrainingLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::usage("supervised training set is empty"));
    }
    for ex in data {
        if ex.tokens.is_empty() || ex.tokens.len() != ex.tags.len() {
            return Err(Error::Annotation(format!(
                "record {}: {} tokens but {} tags",
                ex.id,
                ex.tokens.len(),
                ex.tags.len()
            )));
        }
    }
    let max_len = config.max_len;
    let refs: Vec<&EncodedTaggedExample> = data.iter().collect();
    run_epochs(model, &refs, config, |m| token_accuracy(m, data, max_len).map(Some))
}
