//! Bidirectional LSTM encoder with two classification heads sharing it: a
//! pooled drug-name classifier used for pretraining, and a per-token tag
//! classifier used for supervised tagging.
//!
//! The backward pass is written out by hand (backpropagation through time
//! for both directions) and checked against finite differences in tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::TagLabel;
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy, sigmoid_scalar, softmax, Matrix, Parameter, Parameterized,
};
use crate::text::{EmbeddingTable, PAD_INDEX};

pub const DEFAULT_HIDDEN: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub drug_classes: usize,
    pub gate_biases: bool,
    pub pooling: Pooling,
    pub train_embeddings: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden: usize, drug_classes: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim,
            hidden,
            drug_classes,
            gate_biases: true,
            pooling: Pooling::Mean,
            train_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::usage(format!(
                "model dimensions must be positive (vocab {}, embed {}, hidden {})",
                self.vocab_size, self.embed_dim, self.hidden
            )));
        }
        if self.drug_classes < 2 {
            return Err(Error::usage(format!(
                "drug catalog needs at least 2 names, got {}",
                self.drug_classes
            )));
        }
        Ok(())
    }
}

/// The two training phases; each owns one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Supervised,
}

/// LSTM gates, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Candidate,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Candidate, Gate::Output];

    fn name(self) -> &'static str {
        match self {
            Gate::Input => "input",
            Gate::Forget => "forget",
            Gate::Candidate => "candidate",
            Gate::Output => "output",
        }
    }
}

const INPUT: usize = 0;
const FORGET: usize = 1;
const CANDIDATE: usize = 2;
const OUTPUT: usize = 3;

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::uniform(rows, cols, limit, rng)
}

/// One LSTM direction: per gate a recurrent matrix (H x H), an input
/// projection (H x E) and a bias (H).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub recurrent: [Parameter; 4],
    pub projection: [Parameter; 4],
    pub bias: [Parameter; 4],
}

/// Activations recorded for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub m_prev: Vec<f64>,
    /// Post-activation gate values, indexed like [`Gate::ALL`].
    pub gates: [Vec<f64>; 4],
    pub m: Vec<f64>,
    pub tanh_m: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(hidden: usize, embed: usize) -> Self {
        LstmCell {
            recurrent: std::array::from_fn(|_| Parameter::zeros(hidden, hidden)),
            projection: std::array::from_fn(|_| Parameter::zeros(hidden, embed)),
            bias: std::array::from_fn(|_| Parameter::zeros(hidden, 1)),
        }
    }

    pub fn init<R: Rng>(hidden: usize, embed: usize, gate_biases: bool, rng: &mut R) -> Self {
        let mut cell = LstmCell::zeros(hidden, embed);
        for p in &mut cell.recurrent {
            *p = Parameter::new(xavier(hidden, hidden, rng));
        }
        for p in &mut cell.projection {
            *p = Parameter::new(xavier(hidden, embed, rng));
        }
        if gate_biases {
            cell.bias[FORGET].value.fill(1.0);
        }
        cell
    }

    pub fn hidden(&self) -> usize {
        self.recurrent[0].value.rows()
    }

    pub fn embed(&self) -> usize {
        self.projection[0].value.cols()
    }

    pub fn step(&self, h_prev: &[f64], m_prev: &[f64], x: &[f64]) -> Result<CellStep> {
        let (h, e) = (self.hidden(), self.embed());
        if h_prev.len() != h || m_prev.len() != h {
            return Err(Error::dim("lstm_cell_step", format!("hidden {h}"), format!(
                "state {}/{}",
                h_prev.len(),
                m_prev.len()
            )));
        }
        if x.len() != e {
            return Err(Error::dim("lstm_cell_step", format!("embed {e}"), format!("input {}", x.len())));
        }
        let gates: [Vec<f64>; 4] = std::array::from_fn(|g| {
            let mut pre = self.bias[g].value.as_slice().to_vec();
            self.recurrent[g].value.matvec_acc(h_prev, &mut pre);
            self.projection[g].value.matvec_acc(x, &mut pre);
            if g == CANDIDATE {
                pre.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                pre.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
            }
            pre
        });
        let m: Vec<f64> = (0..h)
            .map(|j| gates[FORGET][j] * m_prev[j] + gates[INPUT][j] * gates[CANDIDATE][j])
            .collect();
        let tanh_m: Vec<f64> = m.iter().map(|v| v.tanh()).collect();
        let h_t: Vec<f64> = tanh_m.iter().zip(&gates[OUTPUT]).map(|(t, o)| o * t).collect();
        Ok(CellStep {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            m_prev: m_prev.to_vec(),
            gates,
            m,
            tanh_m,
            h: h_t,
        })
    }

    /// Runs the recurrence over `xs` in the given order from a zero state.
    pub fn run<'a, I>(&self, xs: I) -> Result<Vec<CellStep>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let h = self.hidden();
        let mut h_prev = vec![0.0; h];
        let mut m_prev = vec![0.0; h];
        let mut steps = Vec::new();
        for x in xs {
            let step = self.step(&h_prev, &m_prev, x)?;
            h_prev.clone_from(&step.h);
            m_prev.clone_from(&step.m);
            steps.push(step);
        }
        Ok(steps)
    }

    /// Backpropagation through time. `dh[s]` is the external gradient on the
    /// hidden output of step `s` (processing order). Parameter gradients are
    /// accumulated; input gradients are returned when `want_dx` is set.
    pub fn backward(
        &mut self,
        steps: &[CellStep],
        dh: &[Vec<f64>],
        with_bias: bool,
        want_dx: bool,
    ) -> Vec<Vec<f64>> {
        let (h, e) = (self.hidden(), self.embed());
        let mut dh_next = vec![0.0; h];
        let mut dm_next = vec![0.0; h];
        let mut dxs = if want_dx { vec![vec![0.0; e]; steps.len()] } else { Vec::new() };
        let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; h]);

        for s in (0..steps.len()).rev() {
            let step = &steps[s];
            let [u, f, c, o] = &step.gates;
            for j in 0..h {
                let dh_j = dh[s][j] + dh_next[j];
                let tm = step.tanh_m[j];
                let d_o = dh_j * tm;
                let dm = dm_next[j] + dh_j * o[j] * (1.0 - tm * tm);
                da[INPUT][j] = dm * c[j] * u[j] * (1.0 - u[j]);
                da[FORGET][j] = dm * step.m_prev[j] * f[j] * (1.0 - f[j]);
                da[CANDIDATE][j] = dm * u[j] * (1.0 - c[j] * c[j]);
                da[OUTPUT][j] = d_o * o[j] * (1.0 - o[j]);
                dm_next[j] = dm * f[j];
            }
            dh_next.fill(0.0);
            #[allow(clippy::needless_range_loop)]
            for g in 0..4 {
                self.recurrent[g].grad.add_outer(&da[g], &step.h_prev);
                self.projection[g].grad.add_outer(&da[g], &step.x);
                if with_bias {
                    self.bias[g].grad.add_scaled(&da[g], 1.0);
                }
                self.recurrent[g].value.matvec_t_acc(&da[g], &mut dh_next);
                if want_dx {
                    self.projection[g].value.matvec_t_acc(&da[g], &mut dxs[s]);
                }
            }
        }
        dxs
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, with_bias: bool, out: &mut Vec<(String, &'a mut Parameter)>) {
        let LstmCell {
            recurrent,
            projection,
            bias,
        } = self;
        for (g, p) in Gate::ALL.iter().zip(recurrent.iter_mut()) {
            out.push((format!("{prefix}.recurrent.{}", g.name()), p));
        }
        for (g, p) in Gate::ALL.iter().zip(projection.iter_mut()) {
            out.push((format!("{prefix}.projection.{}", g.name()), p));
        }
        if with_bias {
            for (g, p) in Gate::ALL.iter().zip(bias.iter_mut()) {
                out.push((format!("{prefix}.bias.{}", g.name()), p));
            }
        }
    }

    fn named<'a>(&'a self, prefix: &str, with_bias: bool, out: &mut Vec<(String, &'a Parameter)>) {
        for (g, p) in Gate::ALL.iter().zip(&self.recurrent) {
            out.push((format!("{prefix}.recurrent.{}", g.name()), p));
        }
        for (g, p) in Gate::ALL.iter().zip(&self.projection) {
            out.push((format!("{prefix}.projection.{}", g.name()), p));
        }
        if with_bias {
            for (g, p) in Gate::ALL.iter().zip(&self.bias) {
                out.push((format!("{prefix}.bias.{}", g.name()), p));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

/// Recorded activations of both directions. `backward_steps` is stored in
/// processing order, i.e. `backward_steps[0]` is the last token.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmTrace {
    pub forward_steps: Vec<CellStep>,
    pub backward_steps: Vec<CellStep>,
}

impl BiLstmTrace {
    pub fn len(&self) -> usize {
        self.forward_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward_steps.is_empty()
    }

    /// `[forward_t ; backward_t]` for every position.
    pub fn outputs(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        (0..n)
            .map(|t| {
                let mut v = self.forward_steps[t].h.clone();
                v.extend_from_slice(&self.backward_steps[n - 1 - t].h);
                v
            })
            .collect()
    }
}

impl BiLstm {
    pub fn init<R: Rng>(hidden: usize, embed: usize, gate_biases: bool, rng: &mut R) -> Self {
        BiLstm {
            forward: LstmCell::init(hidden, embed, gate_biases, rng),
            backward: LstmCell::init(hidden, embed, gate_biases, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn trace(&self, xs: &[&[f64]]) -> Result<BiLstmTrace> {
        if xs.is_empty() {
            return Err(Error::usage("BiLSTM input sequence is empty"));
        }
        Ok(BiLstmTrace {
            forward_steps: self.forward.run(xs.iter().copied())?,
            backward_steps: self.backward.run(xs.iter().rev().copied())?,
        })
    }

    /// `dh[t]` is the gradient on output position `t` (length 2H).
    fn backprop(&mut self, trace: &BiLstmTrace, dh: &[Vec<f64>], with_bias: bool, want_dx: bool) -> Vec<Vec<f64>> {
        let h = self.hidden();
        let n = trace.len();
        let dh_fwd: Vec<Vec<f64>> = dh.iter().map(|v| v[..h].to_vec()).collect();
        let dh_bwd: Vec<Vec<f64>> = (0..n).map(|s| dh[n - 1 - s][h..].to_vec()).collect();
        let mut dx = self.forward.backward(&trace.forward_steps, &dh_fwd, with_bias, want_dx);
        let dx_b = self.backward.backward(&trace.backward_steps, &dh_bwd, with_bias, want_dx);
        if want_dx {
            for (s, v) in dx_b.iter().enumerate() {
                for (a, b) in dx[n - 1 - s].iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
        dx
    }
}

pub fn lstm_cell_step(cell: &LstmCell, h_prev: &[f64], m_prev: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let step = cell.step(h_prev, m_prev, x)?;
    Ok((step.h, step.m))
}

pub fn bilstm_forward(params: &BiLstm, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    Ok(params.trace(xs)?.outputs())
}

/// Mean (or sum) of the first `valid_len` vectors.
pub fn pool(h_seq: &[Vec<f64>], valid_len: usize, pooling: Pooling) -> Result<Vec<f64>> {
    if valid_len == 0 || valid_len > h_seq.len() {
        return Err(Error::usage(format!(
            "pooling length {valid_len} outside 1..={}",
            h_seq.len()
        )));
    }
    let mut out = vec![0.0; h_seq[0].len()];
    for h in &h_seq[..valid_len] {
        for (o, v) in out.iter_mut().zip(h) {
            *o += v;
        }
    }
    if pooling == Pooling::Mean {
        let n = valid_len as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub fn mean_pool(h_seq: &[Vec<f64>], valid_len: usize) -> Result<Vec<f64>> {
    pool(h_seq, valid_len, Pooling::Mean)
}

/// Affine layer followed by softmax: `weight` is classes x 2H.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    pub weight: Parameter,
    pub bias: Parameter,
}

pub type DrugHead = SoftmaxHead;
pub type TagHead = SoftmaxHead;

impl SoftmaxHead {
    pub fn zeros(classes: usize, input: usize) -> Self {
        SoftmaxHead {
            weight: Parameter::zeros(classes, input),
            bias: Parameter::zeros(classes, 1),
        }
    }

    pub fn init<R: Rng>(classes: usize, input: usize, rng: &mut R) -> Self {
        SoftmaxHead {
            weight: Parameter::new(xavier(classes, input, rng)),
            bias: Parameter::zeros(classes, 1),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.weight.value.cols() {
            return Err(Error::dim(
                "softmax head",
                format!("{}x{}", self.weight.value.rows(), self.weight.value.cols()),
                format!("input {}", input.len()),
            ));
        }
        let mut logits = self.bias.value.as_slice().to_vec();
        self.weight.value.matvec_acc(input, &mut logits);
        softmax(&logits)
    }

    /// Accumulates gradients for `loss = CE(predict(input), target)` given the
    /// softmax output `probs`, and returns the gradient on `input`.
    fn backprop(&mut self, input: &[f64], probs: &[f64], target: usize, scale: f64) -> Vec<f64> {
        let dz: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| scale * (p - if k == target { 1.0 } else { 0.0 }))
            .collect();
        self.weight.grad.add_outer(&dz, input);
        self.bias.grad.add_scaled(&dz, 1.0);
        let mut d_input = vec![0.0; input.len()];
        self.weight.value.matvec_t_acc(&dz, &mut d_input);
        d_input
    }
}

pub fn predict_drug(head: &DrugHead, pooled: &[f64]) -> Result<Vec<f64>> {
    head.predict(pooled)
}

pub fn tag_forward(head: &TagHead, h_seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if h_seq.is_empty() {
        return Err(Error::usage("tagging an empty sequence"));
    }
    h_seq.iter().map(|h| head.predict(h)).collect()
}

/// Sum of per-position cross-entropy, skipping positions whose gold tag is PAD.
pub fn sequence_loss(predictions: &[Vec<f64>], gold: &[TagLabel]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::dim(
            "sequence_loss",
            format!("{} predictions", predictions.len()),
            format!("{} gold tags", gold.len()),
        ));
    }
    predictions
        .iter()
        .zip(gold)
        .filter(|(_, g)| **g != TagLabel::Pad)
        .map(|(p, g)| cross_entropy(p, g.index()))
        .sum()
}

/// What a training forward pass is scored against.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Drug(usize),
    Tags(&'a [TagLabel]),
}

#[derive(Debug, Clone)]
enum HeadTrace {
    Drug { pooled: Vec<f64>, probs: Vec<f64>, target: usize },
    Tags { probs: Vec<Vec<f64>>, gold: Vec<TagLabel> },
}

#[derive(Debug, Clone)]
struct Trace {
    tokens: Vec<usize>,
    encoder: BiLstmTrace,
    outputs: Vec<Vec<f64>>,
    head: HeadTrace,
}

/// The full tagger: frozen (by default) embeddings, shared BiLSTM encoder,
/// drug-name head and tag head.
#[derive(Debug, Clone)]
pub struct AdrTagger {
    pub config: ModelConfig,
    pub seed: u64,
    pub embeddings: Parameter,
    pub encoder: BiLstm,
    pub drug_head: DrugHead,
    pub tag_head: TagHead,
    trace: Option<Trace>,
}

impl PartialEq for AdrTagger {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.embeddings.value == other.embeddings.value
            && self.encoder == other.encoder
            && self.drug_head == other.drug_head
            && self.tag_head == other.tag_head
    }
}

impl AdrTagger {
    /// Fresh model with seeded random embeddings.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let table = EmbeddingTable::random(config.vocab_size, config.embed_dim, seed);
        AdrTagger::with_embeddings(config, table.matrix, seed)
    }

    pub fn with_embeddings(config: ModelConfig, embeddings: Matrix, seed: u64) -> Result<Self> {
        config.validate()?;
        if embeddings.shape() != (config.vocab_size, config.embed_dim) {
            return Err(Error::dim(
                "embeddings",
                format!("{}x{}", config.vocab_size, config.embed_dim),
                format!("{}x{}", embeddings.rows(), embeddings.cols()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h2 = 2 * config.hidden;
        let encoder = BiLstm::init(config.hidden, config.embed_dim, config.gate_biases, &mut rng);
        let drug_head = SoftmaxHead::init(config.drug_classes, h2, &mut rng);
        let tag_head = SoftmaxHead::init(TagLabel::COUNT, h2, &mut rng);
        Ok(AdrTagger {
            config,
            seed,
            embeddings: Parameter::new(embeddings),
            encoder,
            drug_head,
            tag_head,
            trace: None,
        })
    }

    /// Model with every parameter zero, for shape templates.
    pub fn zeros(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h2 = 2 * config.hidden;
        Ok(AdrTagger {
            config,
            seed,
            embeddings: Parameter::zeros(config.vocab_size, config.embed_dim),
            encoder: BiLstm {
                forward: LstmCell::zeros(config.hidden, config.embed_dim),
                backward: LstmCell::zeros(config.hidden, config.embed_dim),
            },
            drug_head: SoftmaxHead::zeros(config.drug_classes, h2),
            tag_head: SoftmaxHead::zeros(TagLabel::COUNT, h2),
            trace: None,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::usage("empty token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::usage(format!(
                "token index {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<BiLstmTrace> {
        self.check_tokens(tokens)?;
        let xs: Vec<&[f64]> = tokens.iter().map(|&t| self.embeddings.value.row(t)).collect();
        self.encoder.trace(&xs)
    }

    /// Encoder outputs, one 2H vector per token.
    pub fn hidden_states(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(self.encode(tokens)?.outputs())
    }

    pub fn drug_probabilities(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let outputs = self.hidden_states(tokens)?;
        let pooled = pool(&outputs, outputs.len(), self.config.pooling)?;
        self.drug_head.predict(&pooled)
    }

    pub fn tag_probabilities(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        tag_forward(&self.tag_head, &self.hidden_states(tokens)?)
    }

    pub fn predict_drug(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(&self.drug_probabilities(tokens)?))
    }

    pub fn predict_tags(&self, tokens: &[usize]) -> Result<Vec<TagLabel>> {
        Ok(self
            .tag_probabilities(tokens)?
            .iter()
            .map(|p| TagLabel::from_index(argmax(p)).unwrap_or(TagLabel::O))
            .collect())
    }

    fn run(&self, tokens: &[usize], objective: Objective<'_>) -> Result<(f64, Trace)> {
        let encoder = self.encode(tokens)?;
        let outputs = encoder.outputs();
        let (loss, head) = match objective {
            Objective::Drug(target) => {
                let pooled = pool(&outputs, outputs.len(), self.config.pooling)?;
                let probs = self.drug_head.predict(&pooled)?;
                let loss = cross_entropy(&probs, target)?;
                (loss, HeadTrace::Drug { pooled, probs, target })
            }
            Objective::Tags(gold) => {
                let probs = tag_forward(&self.tag_head, &outputs)?;
                let loss = sequence_loss(&probs, gold)?;
                (loss, HeadTrace::Tags { probs, gold: gold.to_vec() })
            }
        };
        Ok((
            loss,
            Trace {
                tokens: tokens.to_vec(),
                encoder,
                outputs,
                head,
            },
        ))
    }

    /// Loss without recording anything.
    pub fn loss(&self, tokens: &[usize], objective: Objective<'_>) -> Result<f64> {
        Ok(self.run(tokens, objective)?.0)
    }

    /// Forward pass that records activations for [`AdrTagger::backward`].
    pub fn forward(&mut self, tokens: &[usize], objective: Objective<'_>) -> Result<f64> {
        let (loss, trace) = self.run(tokens, objective)?;
        self.trace = Some(trace);
        Ok(loss)
    }

    /// Accumulates `scale * d loss / d param` into every trainable parameter
    /// touched by the last recorded forward pass, and clears the record.
    pub fn backward(&mut self, scale: f64) -> Result<()> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::usage("backward called without a recorded forward pass"))?;
        let n = trace.outputs.len();
        let dh: Vec<Vec<f64>> = match &trace.head {
            HeadTrace::Drug { pooled, probs, target } => {
                let d_pooled = self.drug_head.backprop(pooled, probs, *target, scale);
                let factor = match self.config.pooling {
                    Pooling::Mean => 1.0 / n as f64,
                    Pooling::Sum => 1.0,
                };
                let per_step: Vec<f64> = d_pooled.iter().map(|v| v * factor).collect();
                vec![per_step; n]
            }
            HeadTrace::Tags { probs, gold } => trace
                .outputs
                .iter()
                .zip(probs)
                .zip(gold)
                .map(|((h, p), g)| {
                    if *g == TagLabel::Pad {
                        vec![0.0; h.len()]
                    } else {
                        self.tag_head.backprop(h, p, g.index(), scale)
                    }
                })
                .collect(),
        };
        let train_emb = self.config.train_embeddings;
        let dx = self
            .encoder
            .backprop(&trace.encoder, &dh, self.config.gate_biases, train_emb);
        if train_emb {
            for (&tok, d) in trace.tokens.iter().zip(&dx) {
                if tok != PAD_INDEX {
                    self.embeddings.grad.row_mut(tok).iter_mut().zip(d).for_each(|(g, v)| *g += v);
                }
            }
        }
        Ok(())
    }

    pub fn has_pending_forward(&self) -> bool {
        self.trace.is_some()
    }

    fn encoder_named_mut<'a>(
        encoder: &'a mut BiLstm,
        with_bias: bool,
        out: &mut Vec<(String, &'a mut Parameter)>,
    ) {
        let BiLstm { forward, backward } = encoder;
        forward.named_mut("encoder.forward", with_bias, out);
        backward.named_mut("encoder.backward", with_bias, out);
    }

    /// Trainable parameters updated in `phase`: the encoder, that phase's
    /// head, and the embeddings when they are trainable.
    pub fn phase_parameters_mut(&mut self, phase: Phase) -> Vec<(String, &mut Parameter)> {
        let with_bias = self.config.gate_biases;
        let train_emb = self.config.train_embeddings;
        let AdrTagger {
            embeddings,
            encoder,
            drug_head,
            tag_head,
            ..
        } = self;
        let mut out = Vec::new();
        if train_emb {
            out.push(("embeddings".to_string(), embeddings));
        }
        Self::encoder_named_mut(encoder, with_bias, &mut out);
        let (prefix, head) = match phase {
            Phase::Pretrain => ("drug_head", drug_head),
            Phase::Supervised => ("tag_head", tag_head),
        };
        out.push((format!("{prefix}.weight"), &mut head.weight));
        out.push((format!("{prefix}.bias"), &mut head.bias));
        out
    }

    /// Every stored tensor, trainable or not, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut named = Vec::new();
        named.push(("embeddings".to_string(), &self.embeddings));
        self.encoder.forward.named("encoder.forward", true, &mut named);
        self.encoder.backward.named("encoder.backward", true, &mut named);
        named.push(("drug_head.weight".to_string(), &self.drug_head.weight));
        named.push(("drug_head.bias".to_string(), &self.drug_head.bias));
        named.push(("tag_head.weight".to_string(), &self.tag_head.weight));
        named.push(("tag_head.bias".to_string(), &self.tag_head.bias));
        named.into_iter().map(|(n, p)| (n, &p.value)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let AdrTagger {
            embeddings,
            encoder,
            drug_head,
            tag_head,
            ..
        } = self;
        let mut named = vec![("embeddings".to_string(), embeddings)];
        Self::encoder_named_mut(encoder, true, &mut named);
        named.push(("drug_head.weight".to_string(), &mut drug_head.weight));
        named.push(("drug_head.bias".to_string(), &mut drug_head.bias));
        named.push(("tag_head.weight".to_string(), &mut tag_head.weight));
        named.push(("tag_head.bias".to_string(), &mut tag_head.bias));
        named.into_iter().map(|(n, p)| (n, &mut p.value)).collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

/// All trainable parameters of both phases.
impl Parameterized for AdrTagger {
    fn parameters(&self) -> Vec<(String, &Parameter)> {
        let with_bias = self.config.gate_biases;
        let mut out = Vec::new();
        if self.config.train_embeddings {
            out.push(("embeddings".to_string(), &self.embeddings));
        }
        self.encoder.forward.named("encoder.forward", with_bias, &mut out);
        self.encoder.backward.named("encoder.backward", with_bias, &mut out);
        out.push(("drug_head.weight".to_string(), &self.drug_head.weight));
        out.push(("drug_head.bias".to_string(), &self.drug_head.bias));
        out.push(("tag_head.weight".to_string(), &self.tag_head.weight));
        out.push(("tag_head.bias".to_string(), &self.tag_head.bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let with_bias = self.config.gate_biases;
        let train_emb = self.config.train_embeddings;
        let AdrTagger {
            embeddings,
            encoder,
            drug_head,
            tag_head,
            ..
        } = self;
        let mut out = Vec::new();
        if train_emb {
            out.push(("embeddings".to_string(), embeddings));
        }
        Self::encoder_named_mut(encoder, with_bias, &mut out);
        out.push(("drug_head.weight".to_string(), &mut drug_head.weight));
        out.push(("drug_head.bias".to_string(), &mut drug_head.bias));
        out.push(("tag_head.weight".to_string(), &mut tag_head.weight));
        out.push(("tag_head.bias".to_string(), &mut tag_head.bias));
        out
    }
}

/// Index of the largest entry; first wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::numerics::{finite_difference_gradient, relative_error};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_cell(h: usize, e: usize, seed: u64) -> LstmCell {
        let mut r = rng(seed);
        let mut cell = LstmCell::zeros(h, e);
        for p in cell.recurrent.iter_mut().chain(&mut cell.projection).chain(&mut cell.bias) {
            let (rows, cols) = p.shape();
            *p = Parameter::new(Matrix::uniform(rows, cols, 1.0, &mut r));
        }
        cell
    }

    #[test]
    fn zero_cell_stays_at_zero() {
        let cell = LstmCell::zeros(3, 2);
        let (h, m) = lstm_cell_step(&cell, &[0.0; 3], &[0.0; 3], &[0.7, -2.0]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(m, vec![0.0; 3]);
    }

    #[test]
    fn unit_weight_scalar_cell_stays_at_zero() {
        let mut cell = LstmCell::zeros(1, 1);
        for p in cell.recurrent.iter_mut().chain(&mut cell.projection) {
            p.value.fill(1.0);
        }
        let (h, m) = lstm_cell_step(&cell, &[0.0], &[0.0], &[0.0]).unwrap();
        assert_eq!((h[0], m[0]), (0.0, 0.0));
    }

    #[test]
    fn scalar_cell_matches_hand_trace() {
        let cell = random_cell(1, 1, 11);
        let s = |g: usize| {
            (
                cell.recurrent[g].value.as_slice()[0],
                cell.projection[g].value.as_slice()[0],
                cell.bias[g].value.as_slice()[0],
            )
        };
        let (h0, m0, x) = (0.3, -0.4, 0.9);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let pre = |g: usize| {
            let (w, i, b) = s(g);
            w * h0 + i * x + b
        };
        let u = sig(pre(0));
        let f = sig(pre(1));
        let c = pre(2).tanh();
        let o = sig(pre(3));
        let m = f * m0 + u * c;
        let h = o * m.tanh();
        let (got_h, got_m) = lstm_cell_step(&cell, &[h0], &[m0], &[x]).unwrap();
        assert!((got_m[0] - m).abs() < 1e-15);
        assert!((got_h[0] - h).abs() < 1e-15);
    }

    #[test]
    fn cell_rejects_bad_dims() {
        let cell = LstmCell::zeros(3, 2);
        assert!(cell.step(&[0.0; 2], &[0.0; 3], &[0.0; 2]).is_err());
        assert!(cell.step(&[0.0; 3], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn bilstm_single_step_and_zero_params() {
        let bi = BiLstm {
            forward: random_cell(3, 2, 1),
            backward: random_cell(3, 2, 2),
        };
        let x = [0.5, -0.25];
        let out = bilstm_forward(&bi, &[&x]).unwrap();
        let (hf, _) = lstm_cell_step(&bi.forward, &[0.0; 3], &[0.0; 3], &x).unwrap();
        let (hb, _) = lstm_cell_step(&bi.backward, &[0.0; 3], &[0.0; 3], &x).unwrap();
        assert_eq!(out[0], [hf, hb].concat());

        let zero = BiLstm {
            forward: LstmCell::zeros(3, 2),
            backward: LstmCell::zeros(3, 2),
        };
        let seq = [[1.0, 2.0], [3.0, 4.0]];
        let xs: Vec<&[f64]> = seq.iter().map(|v| v.as_slice()).collect();
        for h in bilstm_forward(&zero, &xs).unwrap() {
            assert!(h.iter().all(|&v| v == 0.0));
        }
        assert!(bilstm_forward(&zero, &[]).is_err());
    }

    fn swap_halves(v: &[f64]) -> Vec<f64> {
        let h = v.len() / 2;
        [&v[h..], &v[..h]].concat()
    }

    #[test]
    fn palindrome_with_shared_cell_is_self_dual() {
        let cell = random_cell(4, 3, 5);
        let bi = BiLstm {
            forward: cell.clone(),
            backward: cell,
        };
        let a = [0.1, -0.2, 0.3];
        let b = [0.9, 0.4, -0.7];
        let c = [-0.5, 0.0, 0.2];
        let seq: Vec<&[f64]> = vec![&a, &b, &c, &b, &a];
        let out = bilstm_forward(&bi, &seq).unwrap();
        let transformed: Vec<Vec<f64>> = out.iter().rev().map(|v| swap_halves(v)).collect();
        assert_eq!(transformed, out);
    }

    #[test]
    fn pooling_examples() {
        let v = vec![1.0, -2.0];
        assert_eq!(mean_pool(&[v.clone(), v.clone(), v.clone()], 3).unwrap(), v);
        assert_eq!(mean_pool(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap(), vec![0.5, 0.5]);
        let padded = vec![vec![3.0, 4.0], vec![9.0, 9.0], vec![7.0, 7.0]];
        assert_eq!(mean_pool(&padded, 1).unwrap(), vec![3.0, 4.0]);
        assert_eq!(pool(&padded, 2, Pooling::Sum).unwrap(), vec![12.0, 13.0]);
        assert!(mean_pool(&padded, 0).is_err());
        assert!(mean_pool(&padded, 4).is_err());
    }

    #[test]
    fn head_examples() {
        let mut head = SoftmaxHead::zeros(4, 6);
        let p = predict_drug(&head, &[0.3; 6]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for (k, b) in head.bias.value.as_mut_slice().iter_mut().enumerate() {
            *b = ((k + 1) as f64).ln();
        }
        let p = predict_drug(&head, &[0.3; 6]).unwrap();
        for (k, v) in p.iter().enumerate() {
            assert!((v - (k + 1) as f64 / 10.0).abs() < 1e-12);
        }
        assert!(predict_drug(&head, &[0.0; 5]).is_err());

        let mut r = rng(3);
        let head = SoftmaxHead::init(4, 6, &mut r);
        let h1 = vec![0.1, 0.2, -0.3, 0.4, 0.0, 0.9];
        let seq = vec![h1.clone(), vec![0.0; 6], h1];
        let ys = tag_forward(&head, &seq).unwrap();
        assert_eq!(ys[0], ys[2]);
        for y in &ys {
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let zero = SoftmaxHead::zeros(4, 6);
        for y in tag_forward(&zero, &seq).unwrap() {
            assert!(y.iter().all(|&v| v == 0.25));
        }
        assert!(tag_forward(&zero, &[]).is_err());
    }

    #[test]
    fn sequence_loss_examples() {
        use TagLabel::*;
        let onehot = |t: TagLabel| {
            let mut v = vec![0.0; 4];
            v[t.index()] = 1.0;
            v
        };
        let gold = [O, IAdr, IAdr, Pad];
        let perfect: Vec<Vec<f64>> = gold.iter().map(|&t| onehot(t)).collect();
        assert_eq!(sequence_loss(&perfect, &gold).unwrap(), 0.0);
        let uniform = vec![vec![0.25; 4]; 4];
        assert!((sequence_loss(&uniform, &gold).unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!(sequence_loss(&uniform[..3], &gold).is_err());

        let mut r = rng(9);
        let preds: Vec<Vec<f64>> = (0..4)
            .map(|_| softmax(&(0..4).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let mut oracle = 0.0;
        for t in 0..4 {
            if gold[t] != Pad {
                oracle -= preds[t][gold[t].index()].ln();
            }
        }
        assert!((sequence_loss(&preds, &gold).unwrap() - oracle).abs() < 1e-12);
    }

    fn tiny_model(seed: u64, gate_biases: bool, pooling: Pooling, train_embeddings: bool) -> AdrTagger {
        let mut cfg = ModelConfig::new(9, 5, 7, 3);
        cfg.gate_biases = gate_biases;
        cfg.pooling = pooling;
        cfg.train_embeddings = train_embeddings;
        let mut m = AdrTagger::with_embeddings(cfg, Matrix::uniform(9, 5, 1.0, &mut rng(seed + 100)), seed).unwrap();
        // random biases so their gradients are exercised away from zero
        let mut r = rng(seed + 200);
        for (_, p) in m.parameters_mut() {
            if p.shape().1 == 1 {
                let (rows, cols) = p.shape();
                p.value = Matrix::uniform(rows, cols, 0.5, &mut r);
            }
        }
        m
    }

    fn check_gradients(model: &mut AdrTagger, tokens: &[usize], objective: Objective<'_>) {
        model.zero_grad();
        model.forward(tokens, objective).unwrap();
        model.backward(1.0).unwrap();
        let analytic: Vec<(String, Matrix)> =
            model.parameters().into_iter().map(|(n, p)| (n, p.grad.clone())).collect();
        let numeric = finite_difference_gradient(|m: &AdrTagger| m.loss(tokens, objective), model, 1e-5).unwrap();
        for ((name, a), (_, n)) in analytic.iter().zip(&numeric) {
            for (x, y) in a.as_slice().iter().zip(n.as_slice()) {
                let err = relative_error(*x, *y, 1e-6);
                assert!(err < 1e-4, "{name}: analytic {x} numeric {y} rel {err}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use TagLabel::*;
        let tokens = [3, 0, 7, 2];
        let gold = [O, IAdr, IAdr, IInd];
        for seed in 0..3 {
            let mut m = tiny_model(seed, true, Pooling::Mean, false);
            check_gradients(&mut m, &tokens, Objective::Drug(seed as usize % 3));
            check_gradients(&mut m, &tokens, Objective::Tags(&gold));
        }
    }

    #[test]
    fn gradients_match_in_ablation_configs() {
        use TagLabel::*;
        let tokens = [1, 5, 8];
        let gold = [IAdr, O, Pad];
        let mut m = tiny_model(42, false, Pooling::Sum, true);
        check_gradients(&mut m, &tokens, Objective::Drug(2));
        check_gradients(&mut m, &tokens, Objective::Tags(&gold));
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = tiny_model(0, true, Pooling::Mean, false);
        assert!(matches!(m.backward(1.0), Err(Error::Usage(_))));
        m.forward(&[1, 2], Objective::Drug(0)).unwrap();
        m.backward(1.0).unwrap();
        assert!(m.backward(1.0).is_err());
    }

    #[test]
    fn unrelated_head_gets_zero_gradient() {
        let mut m = tiny_model(1, true, Pooling::Mean, false);
        m.zero_grad();
        m.forward(&[1, 2, 3], Objective::Drug(1)).unwrap();
        m.backward(1.0).unwrap();
        assert!(m.tag_head.weight.grad.as_slice().iter().all(|&g| g == 0.0));
        assert!(m.drug_head.weight.grad.as_slice().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn rejects_out_of_vocabulary_index() {
        let m = tiny_model(1, true, Pooling::Mean, false);
        assert!(m.predict_tags(&[1, 99]).is_err());
        assert!(m.predict_tags(&[]).is_err());
    }

    proptest! {
        #[test]
        fn reversal_duality(seed in 0u64..1000, len in 1usize..7) {
            let bi = BiLstm { forward: random_cell(3, 2, seed), backward: random_cell(3, 2, seed + 1) };
            let swapped = BiLstm { forward: bi.backward.clone(), backward: bi.forward.clone() };
            let mut r = rng(seed + 2);
            let seq: Vec<Vec<f64>> = (0..len).map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect();
            let xs: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
            let rev: Vec<&[f64]> = xs.iter().rev().copied().collect();
            let out = bilstm_forward(&bi, &xs).unwrap();
            let out_rev = bilstm_forward(&swapped, &rev).unwrap();
            let expected: Vec<Vec<f64>> = out.iter().rev().map(|v| swap_halves(v)).collect();
            prop_assert_eq!(out_rev, expected);
            for v in &out {
                prop_assert!(v.iter().all(|x| x.abs() < 1.0));
            }
        }
    }
}
