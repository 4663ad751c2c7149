//! Python bindings for the ADR tagger.
//!
//! Spans cross the boundary as `(start, end, label)` tuples with label
//! `"ADR"` or `"Indication"`; tags as the strings used in labeled files.
//!
//! ```python
//! import adr_py
//! tagger = adr_py.Tagger.load("checkpoints/supervised.ckpt")
//! tagger.predict("this effexor gave me weight gain")
//! ```

use std::path::PathBuf;

use adr_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use adr_core::encoding::{self, Span, SpanLabel, TagLabel};
use adr_core::eval::{self, MatchCounts, TrialResult};
use adr_core::gradcheck::{run_gradcheck, GradCheckConfig};
use adr_core::model::{AdrTagger, ModelConfig, Pooling};
use adr_core::numerics;
use adr_core::pipeline::tagged_tokens;
use adr_core::text::{self, DrugLexicon, Stopwords, Vocabulary};
use adr_core::training::{self, EncodedDrugExample, EncodedTaggedExample, TrainConfig, TrainingLog};
use adr_core::Error;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

type PySpan = (usize, usize, String);
type Triple = (f64, f64, f64);
type Prediction = (Vec<(String, String)>, Vec<PySpan>);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn label_name(label: SpanLabel) -> &'static str {
    match label {
        SpanLabel::Adr => "ADR",
        SpanLabel::Indication => "Indication",
    }
}

fn parse_label(name: &str) -> PyResult<SpanLabel> {
    match name {
        "ADR" => Ok(SpanLabel::Adr),
        "Indication" | "IND" => Ok(SpanLabel::Indication),
        other => Err(PyValueError::new_err(format!("unknown span label {other:?}"))),
    }
}

fn parse_tag(tag: &str) -> PyResult<TagLabel> {
    tag.parse().map_err(PyValueError::new_err)
}

fn to_spans(spans: Vec<PySpan>) -> PyResult<Vec<Span>> {
    spans
        .into_iter()
        .map(|(s, e, l)| Ok(Span::new(s, e, parse_label(&l)?)))
        .collect()
}

fn from_spans(spans: &[Span]) -> Vec<PySpan> {
    spans
        .iter()
        .map(|s| (s.start, s.end, label_name(s.label).to_string()))
        .collect()
}

fn stopwords(words: Option<Vec<String>>) -> Stopwords {
    words.map_or_else(Stopwords::english, Stopwords::new)
}

/// Lowercase, strip punctuation and non-ASCII, replace links and handles.
#[pyfunction]
fn normalize(raw: &str) -> String {
    text::normalize(raw)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    text::tokenize(text)
}

/// normalize + tokenize + stopword removal. `stopwords=None` uses the
/// bundled English list.
#[pyfunction]
#[pyo3(signature = (raw, stopwords=None))]
fn preprocess(raw: &str, stopwords: Option<Vec<String>>) -> Vec<String> {
    text::preprocess("", raw, &self::stopwords(stopwords)).map_or_else(Vec::new, |t| t.tokens)
}

/// IO tags for `length` tokens from `(start, end, label)` spans.
#[pyfunction]
fn encode_spans(length: usize, spans: Vec<PySpan>) -> PyResult<Vec<String>> {
    let tags = encoding::encode(length, &to_spans(spans)?).map_err(to_py)?;
    Ok(tags.iter().map(|t| t.as_str().to_string()).collect())
}

#[pyfunction]
fn decode_spans(tags: Vec<String>) -> PyResult<Vec<PySpan>> {
    let tags = tags.iter().map(|t| parse_tag(t)).collect::<PyResult<Vec<_>>>()?;
    Ok(from_spans(&encoding::decode_spans(&tags)))
}

/// `(matched, predicted, gold)` counts for one tweet.
#[pyfunction]
#[pyo3(signature = (predicted, gold, include_indication=false))]
fn approximate_match(predicted: Vec<PySpan>, gold: Vec<PySpan>, include_indication: bool) -> PyResult<(usize, usize, usize)> {
    let c = eval::approximate_match(&to_spans(predicted)?, &to_spans(gold)?, include_indication);
    Ok((c.matched, c.predicted, c.gold))
}

/// `(precision, recall, f1)`.
#[pyfunction]
fn prf(matched: usize, predicted: usize, gold: usize) -> Triple {
    let s = eval::prf(MatchCounts { matched, predicted, gold });
    (s.precision, s.recall, s.f1)
}

/// Mean and sample standard deviation of P/R/F1 over per-trial counts.
/// Returns `((p, r, f1), (p_std, r_std, f1_std))`.
#[pyfunction]
fn aggregate(trials: Vec<(usize, usize, usize)>) -> PyResult<(Triple, Triple)> {
    let results: Vec<TrialResult> = trials
        .into_iter()
        .enumerate()
        .map(|(i, (matched, predicted, gold))| TrialResult::new(i as u64, MatchCounts { matched, predicted, gold }))
        .collect();
    let r = eval::aggregate_trials(&results).map_err(to_py)?;
    Ok((
        (r.mean.precision, r.mean.recall, r.mean.f1),
        (r.std.precision, r.std.recall, r.std.f1),
    ))
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    numerics::softmax(&logits).map_err(to_py)
}

/// Finite-difference check of every parameter gradient on tiny models.
/// Returns `(passed, worst_relative_error)`.
#[pyfunction]
#[pyo3(signature = (seeds=10, epsilon=1e-5))]
fn gradcheck(seeds: u64, epsilon: f64) -> PyResult<(bool, f64)> {
    let report = run_gradcheck(&GradCheckConfig {
        seeds,
        epsilon,
        ..GradCheckConfig::default()
    })
    .map_err(to_py)?;
    let worst = report.worst().map_or(0.0, |c| c.max_rel_error);
    Ok((report.passed(), worst))
}

fn log_rows(log: &TrainingLog) -> Vec<(usize, f64, Option<f64>)> {
    log.records.iter().map(|r| (r.epoch, r.mean_loss, r.accuracy)).collect()
}

/// A BiLSTM tagger together with its vocabulary and drug catalog.
#[pyclass(name = "Tagger")]
struct PyTagger {
    inner: Checkpoint,
}

impl PyTagger {
    fn ids(&self, tokens: &[String]) -> Vec<usize> {
        self.inner.vocab.encode(tokens)
    }
}

#[pymethods]
impl PyTagger {
    /// Fresh model with random embeddings. `vocab` lists ordinary tokens;
    /// the reserved tokens are added in front.
    #[new]
    #[pyo3(signature = (vocab, drugs, embed_dim=400, hidden=500, seed=1, pooling="mean", gate_biases=true))]
    fn new(
        vocab: Vec<String>,
        drugs: Vec<String>,
        embed_dim: usize,
        hidden: usize,
        seed: u64,
        pooling: &str,
        gate_biases: bool,
    ) -> PyResult<Self> {
        let vocab = Vocabulary::from_tokens(vocab);
        let lexicon = DrugLexicon::new(drugs);
        let mut config = ModelConfig::new(vocab.len(), embed_dim, hidden, lexicon.len());
        config.gate_biases = gate_biases;
        config.pooling = match pooling {
            "mean" => Pooling::Mean,
            "sum" => Pooling::Sum,
            other => return Err(PyValueError::new_err(format!("pooling must be \"mean\" or \"sum\", got {other:?}"))),
        };
        let model = AdrTagger::new(config, seed).map_err(to_py)?;
        Ok(PyTagger {
            inner: Checkpoint {
                model,
                vocab,
                drugs: lexicon.names().to_vec(),
            },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTagger {
            inner: load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.model.config.hidden
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.model.config.embed_dim
    }

    #[getter]
    fn drugs(&self) -> Vec<String> {
        self.inner.drugs.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.model.seed
    }

    /// Tags for already-preprocessed tokens.
    fn tag_tokens(&self, tokens: Vec<String>) -> PyResult<Vec<String>> {
        let tags = self.inner.model.predict_tags(&self.ids(&tokens)).map_err(to_py)?;
        Ok(tags.iter().map(|t| t.as_str().to_string()).collect())
    }

    /// `(token, tag)` pairs and decoded spans for raw tweet text.
    #[pyo3(signature = (raw, stopwords=None))]
    fn predict(&self, raw: &str, stopwords: Option<Vec<String>>) -> PyResult<Prediction> {
        let tokens = preprocess(raw, stopwords);
        if tokens.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let tags = self.inner.model.predict_tags(&self.ids(&tokens)).map_err(to_py)?;
        let pairs = tagged_tokens(&tokens, &tags)
            .into_iter()
            .map(|(tok, tag)| (tok.to_string(), tag.as_str().to_string()))
            .collect();
        Ok((pairs, from_spans(&encoding::decode_spans(&tags))))
    }

    /// Drug-name distribution for a masked token sequence.
    fn drug_probabilities(&self, tokens: Vec<String>) -> PyResult<Vec<f64>> {
        self.inner.model.drug_probabilities(&self.ids(&tokens)).map_err(to_py)
    }

    /// Pretrain on `(tokens, drug_name)` pairs. Returns `(epoch, loss, held_out_accuracy)` rows.
    #[pyo3(signature = (examples, epochs=30, batch_size=128, learning_rate=1e-3, seed=None))]
    fn pretrain(
        &mut self,
        examples: Vec<(Vec<String>, String)>,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: Option<u64>,
    ) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
        let lexicon = DrugLexicon::new(self.inner.drugs.iter());
        let encoded = examples
            .iter()
            .enumerate()
            .map(|(i, (tokens, drug))| {
                let label = lexicon
                    .lookup(drug)
                    .ok_or_else(|| PyValueError::new_err(format!("drug {drug:?} is not in the catalog")))?;
                Ok(EncodedDrugExample {
                    id: i.to_string(),
                    tokens: self.ids(tokens),
                    label,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let mut cfg = TrainConfig::pretrain(seed.unwrap_or(self.inner.model.seed));
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.adam.learning_rate = learning_rate;
        let log = training::pretrain(&mut self.inner.model, &encoded, &cfg).map_err(to_py)?;
        Ok(log_rows(&log))
    }

    /// Supervised training on `(tokens, tags)` pairs. Returns
    /// `(epoch, loss, token_accuracy)` rows.
    #[pyo3(signature = (tweets, epochs=5, learning_rate=1e-3, seed=None))]
    fn train(
        &mut self,
        tweets: Vec<(Vec<String>, Vec<String>)>,
        epochs: usize,
        learning_rate: f64,
        seed: Option<u64>,
    ) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
        let data = tweets
            .iter()
            .enumerate()
            .map(|(i, (tokens, tags))| {
                Ok(EncodedTaggedExample {
                    id: i.to_string(),
                    tokens: self.ids(tokens),
                    tags: tags.iter().map(|t| parse_tag(t)).collect::<PyResult<_>>()?,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let mut cfg = TrainConfig::supervised(seed.unwrap_or(self.inner.model.seed));
        cfg.epochs = epochs;
        cfg.adam.learning_rate = learning_rate;
        let log = training::train_supervised(&mut self.inner.model, &data, &cfg).map_err(to_py)?;
        Ok(log_rows(&log))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.model.config;
        format!(
            "Tagger(vocab_size={}, embed_dim={}, hidden={}, drugs={})",
            c.vocab_size, c.embed_dim, c.hidden, c.drug_classes
        )
    }
}

#[pymodule]
fn adr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(encode_spans, m)?)?;
    m.add_function(wrap_pyfunction!(decode_spans, m)?)?;
    m.add_function(wrap_pyfunction!(approximate_match, m)?)?;
    m.add_function(wrap_pyfunction!(prf, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyTagger>()?;
    Ok(())
}
