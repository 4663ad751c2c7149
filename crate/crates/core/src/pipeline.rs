//! Glue between the text formats on disk and the index sequences the model
//! trains on.

use std::path::Path;

use serde::Serialize;

use crate::encoding::{LabeledTweet, TagLabel};
use crate::error::{Error, Result};
use crate::text::{
    mask_drug, normalize, preprocess, DrugContextExample, DrugLexicon, MaskRejection, Stopwords,
    TokenizedTweet, Vocabulary,
};
use crate::training::{EncodedDrugExample, EncodedTaggedExample};

/// One line of the unlabeled corpus: `tweet_id TAB raw_text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTweet {
    pub id: String,
    pub text: String,
}

pub fn parse_unlabeled(text: &str, path: &Path) -> Result<Vec<RawTweet>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, raw) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected \"tweet_id<TAB>text\"".into(),
        })?;
        out.push(RawTweet {
            id: id.to_string(),
            text: raw.to_string(),
        });
    }
    Ok(out)
}

pub fn load_unlabeled(path: &Path) -> Result<Vec<RawTweet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_unlabeled(&text, path)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PreprocessCounts {
    pub kept: usize,
    pub rejected_no_drug: usize,
    pub rejected_multi_drug: usize,
    pub dropped_empty: usize,
}

/// Normalize, tokenize, drop stopwords, then mask the single drug mention.
pub fn preprocess_corpus(
    tweets: &[RawTweet],
    lexicon: &DrugLexicon,
    stopwords: &Stopwords,
    mask: bool,
) -> (Vec<DrugContextExample>, PreprocessCounts) {
    let mut counts = PreprocessCounts::default();
    let mut out = Vec::new();
    for raw in tweets {
        let Some(tweet) = preprocess(&raw.id, &raw.text, stopwords) else {
            counts.dropped_empty += 1;
            continue;
        };
        match mask_drug(&tweet, lexicon, mask) {
            Ok(ex) => {
                counts.kept += 1;
                out.push(ex);
            }
            Err(MaskRejection::NoDrug) => counts.rejected_no_drug += 1,
            Err(MaskRejection::MultipleDrugs) => counts.rejected_multi_drug += 1,
        }
    }
    (out, counts)
}

/// `tweet_id TAB drug_name TAB space-separated tokens`, one example per line.
pub fn write_drug_examples(examples: &[DrugContextExample], lexicon: &DrugLexicon) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&ex.tweet.source_id);
        out.push('\t');
        out.push_str(&lexicon.names()[ex.drug_label]);
        out.push('\t');
        out.push_str(&ex.tweet.tokens.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_drug_examples(text: &str, lexicon: &DrugLexicon, path: &Path) -> Result<Vec<DrugContextExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(drug), Some(tokens)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(err("expected \"tweet_id<TAB>drug<TAB>tokens\"".into()));
        };
        let drug_label = lexicon
            .lookup(drug)
            .ok_or_else(|| err(format!("drug {drug:?} is not in the lexicon")))?;
        let tokens: Vec<String> = tokens.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(err("no tokens".into()));
        }
        out.push(DrugContextExample {
            tweet: TokenizedTweet {
                source_id: id.to_string(),
                tokens,
            },
            drug_label,
        });
    }
    Ok(out)
}

pub fn load_drug_examples(path: &Path, lexicon: &DrugLexicon) -> Result<Vec<DrugContextExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_drug_examples(&text, lexicon, path)
}

/// Applies the tweet normalization token by token, dropping tokens (and
/// their tags) that normalize to nothing or are stopwords.
pub fn prepare_labeled(tweet: &LabeledTweet, stopwords: &Stopwords) -> LabeledTweet {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for (tok, tag) in tweet.tokens.iter().zip(&tweet.tags) {
        for piece in normalize(tok).split_whitespace() {
            if !stopwords.contains(piece) {
                tokens.push(piece.to_string());
                tags.push(*tag);
            }
        }
    }
    LabeledTweet {
        id: tweet.id.clone(),
        tokens,
        tags,
    }
}

pub fn encode_drug_examples(examples: &[DrugContextExample], vocab: &Vocabulary) -> Vec<EncodedDrugExample> {
    examples
        .iter()
        .map(|ex| EncodedDrugExample {
            id: ex.tweet.source_id.clone(),
            tokens: vocab.encode(&ex.tweet.tokens),
            label: ex.drug_label,
        })
        .collect()
}

/// Empty tweets are skipped.
pub fn encode_tagged(tweets: &[LabeledTweet], vocab: &Vocabulary) -> Vec<EncodedTaggedExample> {
    tweets
        .iter()
        .filter(|t| !t.tokens.is_empty())
        .map(|t| EncodedTaggedExample {
            id: t.id.clone(),
            tokens: vocab.encode(&t.tokens),
            tags: t.tags.clone(),
        })
        .collect()
}

/// Token/tag pairs for display.
pub fn tagged_tokens<'a>(tokens: &'a [String], tags: &[TagLabel]) -> Vec<(&'a str, TagLabel)> {
    tokens.iter().map(String::as_str).zip(tags.iter().copied()).collect()
}
