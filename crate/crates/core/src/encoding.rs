//! IO tag encoding of entity spans and the CoNLL-style labeled file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagLabel {
    IAdr,
    IInd,
    O,
    Pad,
}

impl TagLabel {
    pub const COUNT: usize = 4;
    pub const ALL: [TagLabel; 4] = [TagLabel::IAdr, TagLabel::IInd, TagLabel::O, TagLabel::Pad];

    pub fn index(self) -> usize {
        match self {
            TagLabel::IAdr => 0,
            TagLabel::IInd => 1,
            TagLabel::O => 2,
            TagLabel::Pad => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<TagLabel> {
        TagLabel::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TagLabel::IAdr => "I-ADR",
            TagLabel::IInd => "I-IND",
            TagLabel::O => "O",
            TagLabel::Pad => "<PAD>",
        }
    }

    pub fn entity(self) -> Option<SpanLabel> {
        match self {
            TagLabel::IAdr => Some(SpanLabel::Adr),
            TagLabel::IInd => Some(SpanLabel::Indication),
            TagLabel::O | TagLabel::Pad => None,
        }
    }
}

impl fmt::Display for TagLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses the tags allowed in labeled files. `<PAD>` is not accepted.
impl FromStr for TagLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "I-ADR" => Ok(TagLabel::IAdr),
            "I-IND" | "I-Indication" => Ok(TagLabel::IInd),
            "O" => Ok(TagLabel::O),
            other => Err(format!("unknown tag {other:?} (expected I-ADR, I-IND or O)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpanLabel {
    Adr,
    Indication,
}

impl SpanLabel {
    pub fn tag(self) -> TagLabel {
        match self {
            SpanLabel::Adr => TagLabel::IAdr,
            SpanLabel::Indication => TagLabel::IInd,
        }
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: SpanLabel,
}

impl Span {
    pub fn new(start: usize, end: usize, label: SpanLabel) -> Self {
        Span { start, end, label }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Tags for `len` tokens from gold spans, `O` everywhere else.
pub fn encode(len: usize, spans: &[Span]) -> Result<Vec<TagLabel>> {
    let mut tags = vec![TagLabel::O; len];
    let mut owner: Vec<Option<usize>> = vec![None; len];
    for (si, span) in spans.iter().enumerate() {
        if span.start >= span.end || span.end > len {
            return Err(Error::Annotation(format!(
                "span {span:?} is outside a sequence of {len} tokens"
            )));
        }
        for t in span.start..span.end {
            if let Some(other) = owner[t] {
                return Err(Error::Annotation(format!(
                    "overlapping spans {:?} and {span:?}",
                    spans[other]
                )));
            }
            owner[t] = Some(si);
            tags[t] = span.label.tag();
        }
    }
    Ok(tags)
}

/// Maximal runs of one `I-*` label. `O` and `<PAD>` end a run.
pub fn decode_spans(tags: &[TagLabel]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, SpanLabel)> = None;
    for (t, tag) in tags.iter().enumerate() {
        let label = tag.entity();
        if let Some((start, cur)) = open {
            if label != Some(cur) {
                spans.push(Span::new(start, t, cur));
                open = None;
            }
        }
        if open.is_none() {
            open = label.map(|l| (t, l));
        }
    }
    if let Some((start, cur)) = open {
        spans.push(Span::new(start, tags.len(), cur));
    }
    spans
}

/// Pads (or truncates) a tag sequence to `len` with `<PAD>`.
pub fn pad_tags(tags: &[TagLabel], len: usize) -> Vec<TagLabel> {
    let mut out: Vec<TagLabel> = tags.iter().copied().take(len).collect();
    out.resize(len, TagLabel::Pad);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledTweet {
    pub id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<TagLabel>,
}

/// Parses `token TAB tag` lines; blank lines separate tweets. Tweet ids are
/// `line<N>` where N is the tweet's first line.
pub fn parse_labeled(text: &str, path: &Path) -> Result<Vec<LabeledTweet>> {
    let mut out = Vec::new();
    let mut current: Option<LabeledTweet> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            out.extend(current.take());
            continue;
        }
        let (token, tag) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: "expected \"token<TAB>tag\"".into(),
        })?;
        let tag: TagLabel = tag.trim().parse().map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        let tweet = current.get_or_insert_with(|| LabeledTweet {
            id: format!("line{lineno}"),
            tokens: Vec::new(),
            tags: Vec::new(),
        });
        tweet.tokens.push(token.to_string());
        tweet.tags.push(tag);
    }
    out.extend(current);
    Ok(out)
}

pub fn load_labeled(path: &Path) -> Result<Vec<LabeledTweet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labeled(&text, path)
}

pub fn write_labeled(tweets: &[LabeledTweet]) -> String {
    let mut out = String::new();
    for tweet in tweets {
        for (tok, tag) in tweet.tokens.iter().zip(&tweet.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag.as_str());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TagLabel::*;

    #[test]
    fn encode_weight_gain_tweet() {
        let tokens: Vec<&str> = "@BLENDOS Lamictal and trileptal and seroquel of course the seroquel I take in severe situations because weight gain is not cool"
            .split(' ')
            .collect();
        let weight = tokens.iter().position(|t| *t == "weight").unwrap();
        let tags = encode(tokens.len(), &[Span::new(weight, weight + 2, SpanLabel::Adr)]).unwrap();
        for (i, (tok, tag)) in tokens.iter().zip(&tags).enumerate() {
            let want = if *tok == "weight" || *tok == "gain" { IAdr } else { O };
            assert_eq!(*tag, want, "token {i} {tok}");
        }
    }

    #[test]
    fn encode_edge_cases() {
        assert_eq!(encode(3, &[]).unwrap(), vec![O, O, O]);
        assert_eq!(encode(3, &[Span::new(0, 3, SpanLabel::Adr)]).unwrap(), vec![IAdr; 3]);
        let err = encode(
            5,
            &[Span::new(0, 3, SpanLabel::Adr), Span::new(2, 4, SpanLabel::Indication)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Annotation(_)));
        assert!(err.to_string().contains("start: 0") && err.to_string().contains("start: 2"));
        assert!(encode(2, &[Span::new(1, 3, SpanLabel::Adr)]).is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_spans(&[O, IAdr, IAdr, O]), vec![Span::new(1, 3, SpanLabel::Adr)]);
        assert_eq!(
            decode_spans(&[IAdr, IInd]),
            vec![Span::new(0, 1, SpanLabel::Adr), Span::new(1, 2, SpanLabel::Indication)]
        );
        assert!(decode_spans(&[O, O, O]).is_empty());
        assert_eq!(
            decode_spans(&[IAdr, Pad, IAdr, IAdr]),
            vec![Span::new(0, 1, SpanLabel::Adr), Span::new(2, 4, SpanLabel::Adr)]
        );
    }

    #[test]
    fn labeled_file_parsing() {
        let text = "i\tO\nfeel\tO\ndizzy\tI-ADR\n\n\nneck\tI-IND\npain\tI-IND\n";
        let tweets = parse_labeled(text, Path::new("x.tsv")).unwrap();
        assert_eq!(tweets.len(), 2);
        assert_eq!(tweets[0].id, "line1");
        assert_eq!(tweets[0].tags, vec![O, O, IAdr]);
        assert_eq!(tweets[1].id, "line6");
        let reparsed = parse_labeled(&write_labeled(&tweets), Path::new("y")).unwrap();
        for (a, b) in reparsed.iter().zip(&tweets) {
            assert_eq!((&a.tokens, &a.tags), (&b.tokens, &b.tags));
        }

        let err = parse_labeled("a\tO\nb\tB-ADR\n", Path::new("x.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_labeled("a O\n", Path::new("x.tsv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    /// Disjoint, non-adjacent-same-label spans inside `len` tokens.
    fn span_set() -> impl Strategy<Value = (usize, Vec<Span>)> {
        (1usize..30, prop::collection::vec((0usize..4, 1usize..4, any::<bool>()), 0..8)).prop_map(
            |(gap0, pieces)| {
                let mut spans = Vec::new();
                let mut cursor = gap0 % 3;
                let mut last: Option<Span> = None;
                for (gap, width, adr) in pieces {
                    let label = if adr { SpanLabel::Adr } else { SpanLabel::Indication };
                    let mut start = cursor + gap;
                    if let Some(prev) = last {
                        if prev.end == start && prev.label == label {
                            start += 1;
                        }
                    }
                    let s = Span::new(start, start + width, label);
                    spans.push(s);
                    cursor = s.end;
                    last = Some(s);
                }
                (cursor + gap0 % 4, spans)
            },
        )
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip((len, spans) in span_set()) {
            let tags = encode(len, &spans).unwrap();
            prop_assert_eq!(decode_spans(&tags), spans);
        }

        #[test]
        fn decoded_spans_sorted_and_disjoint(
            tags in prop::collection::vec(prop::sample::select(TagLabel::ALL.to_vec()), 0..30)
        ) {
            let spans = decode_spans(&tags);
            for w in spans.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            for s in &spans {
                prop_assert!(s.start < s.end && s.end <= tags.len());
                prop_assert!(tags[s.start..s.end].iter().all(|t| t.entity() == Some(s.label)));
            }
        }
    }
}
