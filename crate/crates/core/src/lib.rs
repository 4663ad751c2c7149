//! Semi-supervised BiLSTM tagger for adverse drug reaction (ADR) mentions in
//! tweets.
//!
//! A bidirectional LSTM encoder is first pretrained to recover a masked drug
//! name from its tweet context, then fine-tuned to tag each token as inside
//! an ADR, inside an indication, or outside. Everything down to the
//! gradients is implemented here; see [`gradcheck`] for the numerical
//! verification of the backward pass.

pub mod checkpoint;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthetic;
pub mod text;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encoding::{decode_spans, encode, LabeledTweet, Span, SpanLabel, TagLabel};
pub use error::{Error, Result};
pub use eval::{aggregate_trials, approximate_match, prf, EvalReport, MatchCounts, Prf, TrialResult};
pub use model::{AdrTagger, ModelConfig, Objective, Phase, Pooling};
pub use numerics::{Matrix, Parameter, Parameterized};
pub use text::{DrugLexicon, EmbeddingTable, Stopwords, TokenizedTweet, VocabSource, Vocabulary};
pub use training::{pretrain, train_supervised, AdamConfig, TrainConfig, TrainingLog};
