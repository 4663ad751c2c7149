//! Seeded synthetic corpora for desk-scale experiments and tests.
//!
//! The transfer task plants one "cue" word per drug. In pretraining tweets
//! the cue identifies the masked drug; in labeled tweets the two tokens
//! right after a cue form the ADR span. An encoder that learned to spot
//! cues during pretraining therefore already carries the context needed to
//! place ADR spans.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{encode, LabeledTweet, Span, SpanLabel, TagLabel};
use crate::text::{mask_drug, DrugContextExample, DrugLexicon, TokenizedTweet, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferSpec {
    pub drugs: usize,
    pub fillers: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub span_len: usize,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            drugs: 5,
            fillers: 30,
            min_fillers: 4,
            max_fillers: 8,
            span_len: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferCorpus {
    pub lexicon: DrugLexicon,
    pub vocab: Vocabulary,
    pub pretrain: Vec<DrugContextExample>,
    pub train: Vec<LabeledTweet>,
    pub test: Vec<LabeledTweet>,
}

pub fn drug_name(k: usize) -> String {
    format!("drug{k}")
}

pub fn cue_word(k: usize) -> String {
    format!("cue{k}")
}

pub fn filler_word(k: usize) -> String {
    format!("w{k}")
}

fn fillers<R: Rng>(spec: &TransferSpec, rng: &mut R) -> Vec<String> {
    let n = rng.random_range(spec.min_fillers..=spec.max_fillers);
    (0..n).map(|_| filler_word(rng.random_range(0..spec.fillers))).collect()
}

fn drug_tweet<R: Rng>(spec: &TransferSpec, lexicon: &DrugLexicon, id: usize, rng: &mut R) -> DrugContextExample {
    let drug = rng.random_range(0..spec.drugs);
    let mut tokens = fillers(spec, rng);
    let cue_at = rng.random_range(0..=tokens.len());
    tokens.insert(cue_at, cue_word(drug));
    let drug_at = rng.random_range(0..=tokens.len());
    tokens.insert(drug_at, drug_name(drug));
    let tweet = TokenizedTweet {
        source_id: format!("u{id}"),
        tokens,
    };
    mask_drug(&tweet, lexicon, true).expect("generated tweet has exactly one drug")
}

fn labeled_tweet<R: Rng>(spec: &TransferSpec, id: String, rng: &mut R) -> LabeledTweet {
    let mut tokens = fillers(spec, rng);
    while tokens.len() < spec.span_len {
        tokens.push(filler_word(rng.random_range(0..spec.fillers)));
    }
    let cue_at = rng.random_range(0..=tokens.len() - spec.span_len);
    tokens.insert(cue_at, cue_word(rng.random_range(0..spec.drugs)));
    let span = Span::new(cue_at + 1, cue_at + 1 + spec.span_len, SpanLabel::Adr);
    let tags = encode(tokens.len(), &[span]).expect("span inside tweet");
    LabeledTweet { id, tokens, tags }
}

/// `n_pretrain` masked drug tweets plus disjoint labeled train and test sets.
pub fn transfer_corpus(spec: &TransferSpec, seed: u64, n_pretrain: usize, n_train: usize, n_test: usize) -> TransferCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = DrugLexicon::new((0..spec.drugs).map(drug_name));
    let vocab = Vocabulary::from_tokens(
        (0..spec.drugs)
            .map(cue_word)
            .chain((0..spec.fillers).map(filler_word))
            .chain((0..spec.drugs).map(drug_name)),
    );
    let pretrain = (0..n_pretrain).map(|i| drug_tweet(spec, &lexicon, i, &mut rng)).collect();
    let train = (0..n_train).map(|i| labeled_tweet(spec, format!("train{i}"), &mut rng)).collect();
    let test = (0..n_test).map(|i| labeled_tweet(spec, format!("test{i}"), &mut rng)).collect();
    TransferCorpus {
        lexicon,
        vocab,
        pretrain,
        train,
        test,
    }
}

/// `n` short random tag sequences over a `vocab_size` vocabulary (indices
/// from 5 up, leaving the sentinels alone).
pub fn memorization_set(seed: u64, n: usize, vocab_size: usize) -> Vec<(Vec<usize>, Vec<TagLabel>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [TagLabel::IAdr, TagLabel::IInd, TagLabel::O, TagLabel::O];
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..=7);
            let tokens = (0..len).map(|_| rng.random_range(5..vocab_size)).collect();
            let tags = (0..len).map(|_| *labels.choose(&mut rng).unwrap()).collect();
            (tokens, tags)
        })
        .collect()
}
