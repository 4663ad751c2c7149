//! Tweet preprocessing: normalization, tokenization, stopword removal, drug
//! masking, vocabulary construction and pretrained embedding loading.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const LINK: &str = "<LINK>";
pub const USER: &str = "<USER>";
pub const DRUG: &str = "<DRUG>";

/// Reserved vocabulary entries, in index order.
pub const SENTINELS: [&str; 5] = [PAD, UNK, LINK, USER, DRUG];

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;
pub const DRUG_INDEX: usize = 4;

pub const DEFAULT_VOCAB_CAP: usize = 15_000;
pub const DEFAULT_EMBED_DIM: usize = 400;

/// Range used for embedding rows missing from the embedding file.
pub const OOV_INIT_RANGE: f64 = 0.05;

pub fn is_sentinel(token: &str) -> bool {
    SENTINELS.contains(&token)
}

/// Sentinels that may appear in normalized text and are passed through
/// untouched by [`normalize`].
fn is_text_sentinel(token: &str) -> bool {
    token == LINK || token == USER || token == DRUG
}

fn is_url(token: &str) -> bool {
    let lower = token.to_ascii_lowercase();
    lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.")
}

fn is_mention(token: &str) -> bool {
    let mut chars = token.chars();
    chars.next() == Some('@') && chars.next().is_some_and(|c| c.is_alphanumeric() || c == '_')
}

/// Normalizes raw tweet text.
///
/// URLs become `<LINK>`, `@handles` become `<USER>`. Every other
/// whitespace-separated chunk loses its non-ASCII characters and ASCII
/// punctuation (including `#`) and is lowercased. Chunks that end up empty
/// are dropped and the rest are joined by single spaces.
pub fn normalize(raw: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    for chunk in raw.split_whitespace() {
        if is_text_sentinel(chunk) {
            out.push(chunk.to_string());
        } else if is_url(chunk) {
            out.push(LINK.to_string());
        } else if is_mention(chunk) {
            out.push(USER.to_string());
        } else {
            let cleaned: String = chunk
                .chars()
                .filter(|c| c.is_ascii() && !c.is_ascii_punctuation() && !c.is_ascii_whitespace())
                .map(|c| c.to_ascii_lowercase())
                .collect();
            if !cleaned.is_empty() {
                out.push(cleaned);
            }
        }
    }
    out.join(" ")
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Stopword set. Sentinels are never treated as stopwords.
#[derive(Debug, Clone, Default)]
pub struct Stopwords {
    words: HashSet<String>,
}

impl Stopwords {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Stopwords {
            words: words.into_iter().map(Into::into).collect(),
        }
    }

    /// The bundled English list, already in normalized (apostrophe-free) form.
    pub fn english() -> Self {
        Stopwords::new(ENGLISH_STOPWORDS.iter().copied())
    }

    /// One token per line; blank lines and lines starting with `#` ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Stopwords::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| l.to_ascii_lowercase()),
        ))
    }

    pub fn contains(&self, token: &str) -> bool {
        !is_sentinel(token) && self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn remove_stopwords(tokens: &[String], stopwords: &Stopwords) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| !stopwords.contains(t))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedTweet {
    pub source_id: String,
    pub tokens: Vec<String>,
}

/// Runs normalize, tokenize and stopword removal. Returns `None` when
/// nothing survives.
pub fn preprocess(source_id: &str, raw: &str, stopwords: &Stopwords) -> Option<TokenizedTweet> {
    let tokens = remove_stopwords(&tokenize(&normalize(raw)), stopwords);
    if tokens.is_empty() {
        None
    } else {
        Some(TokenizedTweet {
            source_id: source_id.to_string(),
            tokens,
        })
    }
}

/// Ordered catalog of drug names. The catalog index is the pretraining label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrugLexicon {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl DrugLexicon {
    /// Names are lowercased; duplicates keep their first position.
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = DrugLexicon {
            names: Vec::new(),
            index: HashMap::new(),
        };
        for name in names {
            let name = name.as_ref().trim().to_lowercase();
            if name.is_empty() || lex.index.contains_key(&name) {
                continue;
            }
            lex.index.insert(name.clone(), lex.names.len());
            lex.names.push(name);
        }
        lex
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(DrugLexicon::new(text.lines()))
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(&token.to_lowercase()).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugContextExample {
    pub tweet: TokenizedTweet,
    pub drug_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRejection {
    NoDrug,
    MultipleDrugs,
}

/// Replaces the single drug mention with `<DRUG>`. With `mask == false` the
/// drug token is left in place but the tweet is still labeled (the
/// no-mask ablation).
pub fn mask_drug(
    tweet: &TokenizedTweet,
    lexicon: &DrugLexicon,
    mask: bool,
) -> std::result::Result<DrugContextExample, MaskRejection> {
    let mut hits = tweet
        .tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| lexicon.lookup(t).map(|label| (i, label)));
    let (pos, label) = hits.next().ok_or(MaskRejection::NoDrug)?;
    if hits.next().is_some() {
        return Err(MaskRejection::MultipleDrugs);
    }
    let mut tokens = tweet.tokens.clone();
    if mask {
        tokens[pos] = DRUG.to_string();
    }
    Ok(DrugContextExample {
        tweet: TokenizedTweet {
            source_id: tweet.source_id.clone(),
            tokens,
        },
        drug_label: label,
    })
}

/// Which corpora contribute to the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSource {
    #[default]
    Both,
    LabeledOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Sentinels followed by `tokens` in order. Duplicates and sentinel
    /// strings in `tokens` are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SENTINELS {
            vocab.push(s.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !vocab.index.contains_key(&t) {
                vocab.push(t);
            }
        }
        vocab
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to `<UNK>`.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_INDEX)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line in index order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < SENTINELS.len() || tokens[..SENTINELS.len()] != SENTINELS {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "vocabulary file must start with the reserved tokens".into(),
            });
        }
        let vocab = Vocabulary::from_tokens(tokens[SENTINELS.len()..].iter().copied());
        if vocab.len() != tokens.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "duplicate token in vocabulary file".into(),
            });
        }
        Ok(vocab)
    }
}

/// Keeps the `cap` most frequent non-sentinel tokens, ties broken by
/// lexicographic order, after the reserved sentinels.
pub fn build_vocabulary<'a, I>(streams: I, cap: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if cap == 0 {
        return Err(Error::usage("vocabulary cap must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut any = false;
    for stream in streams {
        for token in stream {
            any = true;
            if !is_sentinel(token) {
                *counts.entry(token.as_str()).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(Error::usage("cannot build a vocabulary from an empty corpus"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_tokens(
        ranked.into_iter().take(cap).map(|(t, _)| t.to_string()),
    ))
}

/// Vocabulary from labeled tokens, plus unlabeled tokens when `source` is
/// [`VocabSource::Both`].
pub fn build_vocabulary_from(
    labeled: &[Vec<String>],
    unlabeled: &[Vec<String>],
    source: VocabSource,
    cap: usize,
) -> Result<Vocabulary> {
    let extra: &[Vec<String>] = match source {
        VocabSource::Both => unlabeled,
        VocabSource::LabeledOnly => &[],
    };
    build_vocabulary(labeled.iter().chain(extra).map(Vec::as_slice), cap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Matrix,
    /// Fraction of vocabulary rows (sentinels included) found in the file.
    pub coverage: f64,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }

    /// Table with every non-PAD row drawn uniformly from the OOV range.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = Matrix::zeros(vocab_size, dim);
        for r in 1..vocab_size {
            for v in matrix.row_mut(r) {
                *v = rng.random_range(-OOV_INIT_RANGE..=OOV_INIT_RANGE);
            }
        }
        EmbeddingTable {
            matrix,
            coverage: 0.0,
        }
    }
}

/// Loads a text embedding file (`V D` header, then `token v1 .. vD` lines).
///
/// Rows for vocabulary tokens found in the file are copied. Missing rows are
/// drawn uniformly from `[-0.05, 0.05]` using `seed`, in vocabulary order.
/// The PAD row is always zero.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match fields.as_slice() {
        [v, d] => (
            v.parse::<usize>()
                .map_err(|e| parse_err(1, format!("bad vocabulary count: {e}")))?,
            d.parse::<usize>()
                .map_err(|e| parse_err(1, format!("bad dimension: {e}")))?,
        ),
        _ => return Err(parse_err(1, "header must be \"V D\"".into())),
    };
    if dim == 0 {
        return Err(parse_err(1, "dimension must be positive".into()));
    }

    let mut matrix = Matrix::zeros(vocab.len(), dim);
    let mut found = vec![false; vocab.len()];
    let mut rows_read = 0usize;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows_read += 1;
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default();
        let values = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(lineno, format!("bad number: {e}")))?;
        if values.len() != dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "line {lineno}: expected {dim} values after the token, found {}",
                    values.len()
                ),
            });
        }
        if let Some(v) = values.iter().position(|v| !v.is_finite()) {
            return Err(parse_err(lineno, format!("non-finite value at position {v}")));
        }
        if let Some(idx) = vocab.get(token) {
            if idx != PAD_INDEX && !found[idx] {
                matrix.row_mut(idx).copy_from_slice(&values);
                found[idx] = true;
            }
        }
    }
    if rows_read != count {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("header declares {count} rows, file has {rows_read}"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (idx, hit) in found.iter().enumerate().skip(1) {
        if !hit {
            for v in matrix.row_mut(idx) {
                *v = rng.random_range(-OOV_INIT_RANGE..=OOV_INIT_RANGE);
            }
        }
    }
    let hits = found.iter().filter(|&&f| f).count();
    Ok(EmbeddingTable {
        matrix,
        coverage: hits as f64 / vocab.len() as f64,
    })
}

const ENGLISH_STOPWORDS: &[&str] = &[
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "youre", "youve", "youll",
    "youd", "your", "yours", "yourself", "yourselves", "he", "him", "his", "himself", "she",
    "shes", "her", "hers", "herself", "it", "its", "itself", "they", "them", "their", "theirs",
    "themselves", "what", "which", "who", "whom", "this", "that", "thatll", "these", "those", "am",
    "is", "are", "was", "were", "be", "been", "being", "have", "has", "had", "having", "do",
    "does", "did", "doing", "a", "an", "the", "and", "but", "if", "or", "because", "as", "until",
    "while", "of", "at", "by", "for", "with", "about", "against", "between", "into", "through",
    "during", "before", "after", "above", "below", "to", "from", "up", "down", "in", "out", "on",
    "off", "over", "under", "again", "further", "then", "once", "here", "there", "when", "where",
    "why", "how", "all", "any", "both", "each", "few", "more", "most", "other", "some", "such",
    "only", "own", "same", "so", "than", "too", "very", "s", "t", "can", "will", "just", "should",
    "shouldve", "now", "d", "ll", "m", "o", "re", "ve", "y",
];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize("@JonDoe check http://t.co/x #fun!"),
            "<USER> check <LINK> fun"
        );
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("héllo 😀 world"), "hllo world");
        assert_eq!(normalize("WWW.example.com HTTPS://X"), "<LINK> <LINK>");
        assert_eq!(normalize("@ alone @_x"), "alone <USER>");
        assert_eq!(normalize("don't  stop,   me"), "dont stop me");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("a  b"), toks(&["a", "b"]));
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("<USER> ugh effexor"),
            toks(&["<USER>", "ugh", "effexor"])
        );
    }

    #[test]
    fn stopword_examples() {
        let sw = Stopwords::new(["i", "the"]);
        let input = toks(&["i", "hate", "the", "drug"]);
        let oracle: Vec<String> = input.iter().filter(|t| *t != "i" && *t != "the").cloned().collect();
        assert_eq!(remove_stopwords(&input, &sw), oracle);
        assert_eq!(oracle, toks(&["hate", "drug"]));
        assert!(remove_stopwords(&[], &sw).is_empty());
        let sw = Stopwords::new([DRUG, "x"]);
        assert_eq!(remove_stopwords(&toks(&[DRUG]), &sw), toks(&[DRUG]));
    }

    #[test]
    fn english_list_is_normalized() {
        let sw = Stopwords::english();
        assert!(sw.len() > 120);
        for w in ENGLISH_STOPWORDS {
            assert_eq!(normalize(w), *w);
        }
    }

    fn tweet(tokens: &[&str]) -> TokenizedTweet {
        TokenizedTweet {
            source_id: "t1".into(),
            tokens: toks(tokens),
        }
    }

    #[test]
    fn mask_drug_examples() {
        let lex = DrugLexicon::new(["effexor", "cymbalta"]);
        let ex = mask_drug(&tweet(&["this", "effexor", "sucks"]), &lex, true).unwrap();
        assert_eq!(ex.tweet.tokens, toks(&["this", DRUG, "sucks"]));
        assert_eq!(lex.names()[ex.drug_label], "effexor");

        assert_eq!(
            mask_drug(&tweet(&["cymbalta", "and", "effexor"]), &lex, true),
            Err(MaskRejection::MultipleDrugs)
        );
        assert_eq!(
            mask_drug(&tweet(&["feeling", "fine"]), &lex, true),
            Err(MaskRejection::NoDrug)
        );
        assert_eq!(
            mask_drug(&tweet(&["effexor", "effexor"]), &lex, true),
            Err(MaskRejection::MultipleDrugs)
        );

        let unmasked = mask_drug(&tweet(&["this", "Effexor"]), &lex, false).unwrap();
        assert_eq!(unmasked.tweet.tokens, toks(&["this", "Effexor"]));
        assert_eq!(unmasked.drug_label, 0);
    }

    #[test]
    fn vocabulary_examples() {
        let a = toks(&["a", "a", "b"]);
        let v = build_vocabulary([a.as_slice()], 1).unwrap();
        assert_eq!(v.len(), SENTINELS.len() + 1);
        assert!(v.get("a").is_some() && v.get("b").is_none());

        let tie = toks(&["b", "a"]);
        let v = build_vocabulary([tie.as_slice()], 1).unwrap();
        assert!(v.get("a").is_some() && v.get("b").is_none());

        let v = build_vocabulary([tie.as_slice()], 100).unwrap();
        assert_eq!(v.len(), SENTINELS.len() + 2);

        assert_eq!(v.get(PAD), Some(0));
        assert_eq!(v.lookup("never-seen"), UNK_INDEX);
        assert!(build_vocabulary(std::iter::empty::<&[String]>(), 5).is_err());
        assert!(build_vocabulary([tie.as_slice()], 0).is_err());
    }

    #[test]
    fn vocabulary_source_selection() {
        let labeled = vec![toks(&["pain", "pain"])];
        let unlabeled = vec![toks(&["cure", "cure", "cure"])];
        let both = build_vocabulary_from(&labeled, &unlabeled, VocabSource::Both, 10).unwrap();
        let only = build_vocabulary_from(&labeled, &unlabeled, VocabSource::LabeledOnly, 10).unwrap();
        assert!(both.get("cure").is_some());
        assert!(only.get("cure").is_none());
        assert!(only.get("pain").is_some());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_tokens(["x", "y"]);
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        std::fs::write(&path, "x\ny\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    fn write_file(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        p
    }

    #[test]
    fn embeddings_full_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_tokens(["pain", "drowsy"]);
        let mut body = format!("{} 3\n", vocab.len() - 1);
        for (i, t) in vocab.tokens().iter().enumerate().skip(1) {
            body.push_str(&format!("{t} {i}.0 0.5 -1\n"));
        }
        let path = write_file(dir.path(), "emb.txt", &body);
        let table = load_embeddings(&path, &vocab, 7).unwrap();
        assert_eq!(table.dim(), 3);
        assert!(table.row(PAD_INDEX).iter().all(|&v| v == 0.0));
        assert_eq!(table.row(5), &[5.0, 0.5, -1.0]);
        assert!((table.coverage - (vocab.len() - 1) as f64 / vocab.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn embeddings_missing_rows_are_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_tokens(["pain", "drowsy"]);
        let path = write_file(dir.path(), "emb.txt", "1 2\npain 1 2\n");
        let a = load_embeddings(&path, &vocab, 3).unwrap();
        let b = load_embeddings(&path, &vocab, 3).unwrap();
        let c = load_embeddings(&path, &vocab, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.matrix, c.matrix);
        let drowsy = vocab.get("drowsy").unwrap();
        assert!(a.row(drowsy).iter().all(|v| v.abs() <= OOV_INIT_RANGE));
        assert_eq!(a.row(vocab.get("pain").unwrap()), &[1.0, 2.0]);
        assert!(a.matrix.is_finite());
    }

    #[test]
    fn embeddings_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_tokens(["pain"]);
        let short = write_file(dir.path(), "a.txt", "2 4\nfoo 1 2 3 4\npain 1 2 3\n");
        let err = load_embeddings(&short, &vocab, 0).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("line 3"), "{err}");

        let bad = write_file(dir.path(), "b.txt", "1 2\npain 1 x\n");
        let err = load_embeddings(&bad, &vocab, 0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let header = write_file(dir.path(), "c.txt", "nonsense\n");
        assert!(matches!(load_embeddings(&header, &vocab, 0), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            load_embeddings(&dir.path().join("missing"), &vocab, 0),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in "\\PC{0,60}") {
            let once = normalize(&raw);
            prop_assert_eq!(normalize(&once), once.clone());
            prop_assert!(once.is_ascii());
        }

        #[test]
        fn normalize_idempotent_on_tweetlike(
            parts in prop::collection::vec(
                prop_oneof![
                    Just("http://t.co/x".to_string()),
                    Just("@user".to_string()),
                    Just("#tag!".to_string()),
                    Just("<USER>".to_string()),
                    Just("é😀".to_string()),
                    "[a-zA-Z.,!?#@:/]{1,8}",
                ],
                0..10,
            )
        ) {
            let raw = parts.join(" ");
            let once = normalize(&raw);
            prop_assert_eq!(normalize(&once), once.clone());
            prop_assert!(!once.contains('@') && !once.contains("http"));
        }

        #[test]
        fn mask_leaves_one_sentinel_and_no_drug(
            filler in prop::collection::vec("[a-z]{1,6}", 0..8),
            drug in 0usize..3,
            pos in 0usize..9,
        ) {
            let lex = DrugLexicon::new(["effexor", "cymbalta", "paxil"]);
            let mut tokens: Vec<String> = filler.into_iter().filter(|t| lex.lookup(t).is_none()).collect();
            let pos = pos.min(tokens.len());
            tokens.insert(pos, lex.names()[drug].clone());
            let ex = mask_drug(&TokenizedTweet { source_id: "p".into(), tokens }, &lex, true).unwrap();
            prop_assert_eq!(ex.drug_label, drug);
            prop_assert_eq!(ex.tweet.tokens.iter().filter(|t| *t == DRUG).count(), 1);
            prop_assert!(ex.tweet.tokens.iter().all(|t| lex.lookup(t).is_none()));
        }

        #[test]
        fn vocabulary_keeps_most_frequent(
            stream in prop::collection::vec("[a-f]{1,2}", 1..80),
            cap in 1usize..12,
        ) {
            let vocab = build_vocabulary([stream.as_slice()], cap).unwrap();
            prop_assert!(vocab.len() <= cap + SENTINELS.len());
            let mut freq: HashMap<&str, usize> = HashMap::new();
            for t in &stream { *freq.entry(t.as_str()).or_default() += 1; }
            let kept_min = freq.iter().filter(|(t, _)| vocab.get(t).is_some()).map(|(_, c)| *c).min();
            let dropped_max = freq.iter().filter(|(t, _)| vocab.get(t).is_none()).map(|(_, c)| *c).max();
            if let (Some(k), Some(d)) = (kept_min, dropped_max) {
                prop_assert!(k >= d);
            }
            for (i, t) in vocab.tokens().iter().enumerate() {
                prop_assert_eq!(vocab.get(t), Some(i));
            }
        }
    }
}
