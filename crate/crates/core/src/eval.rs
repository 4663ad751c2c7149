//! Approximate-match scoring of predicted entity spans and aggregation of
//! scores across repeated training trials.
//!
//! A gold span counts as matched when a predicted span with the same label
//! shares at least one token with it. Matching is one-to-one: gold spans are
//! visited left to right and each takes the leftmost unused overlapping
//! prediction. Only ADR spans are scored unless Indication is enabled.

use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::encoding::{decode_spans, Span, SpanLabel};
use crate::error::{Error, Result};
use crate::model::AdrTagger;
use crate::training::EncodedTaggedExample;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl AddAssign for MatchCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.matched += rhs.matched;
        self.predicted += rhs.predicted;
        self.gold += rhs.gold;
    }
}

fn scored(label: SpanLabel, include_indication: bool) -> bool {
    label == SpanLabel::Adr || include_indication
}

pub fn approximate_match(predicted: &[Span], gold: &[Span], include_indication: bool) -> MatchCounts {
    let mut pred: Vec<&Span> = predicted.iter().filter(|s| scored(s.label, include_indication)).collect();
    let mut gold: Vec<&Span> = gold.iter().filter(|s| scored(s.label, include_indication)).collect();
    pred.sort();
    gold.sort();
    let mut used = vec![false; pred.len()];
    let mut matched = 0;
    for g in &gold {
        let hit = pred
            .iter()
            .enumerate()
            .find(|(i, p)| !used[*i] && p.label == g.label && p.overlaps(g));
        if let Some((i, _)) = hit {
            used[i] = true;
            matched += 1;
        }
    }
    MatchCounts {
        matched,
        predicted: pred.len(),
        gold: gold.len(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn prf(counts: MatchCounts) -> Prf {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(counts.matched, counts.predicted);
    let recall = ratio(counts.matched, counts.gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Corpus-level counts for `model` on `data` (counts summed over tweets).
pub fn score_model(
    model: &AdrTagger,
    data: &[EncodedTaggedExample],
    max_len: usize,
    include_indication: bool,
) -> Result<MatchCounts> {
    let mut total = MatchCounts::default();
    for ex in data {
        let n = ex.tokens.len().min(max_len);
        if n == 0 {
            continue;
        }
        let predicted = decode_spans(&model.predict_tags(&ex.tokens[..n])?);
        let gold = decode_spans(&ex.tags[..n]);
        total += approximate_match(&predicted, &gold, include_indication);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub counts: MatchCounts,
    pub scores: Prf,
}

impl TrialResult {
    pub fn new(seed: u64, counts: MatchCounts) -> Self {
        TrialResult {
            seed,
            counts,
            scores: prf(counts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: Vec<TrialResult>,
    pub mean: Prf,
    pub std: Prf,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample (n - 1) standard deviation of each metric.
pub fn aggregate_trials(trials: &[TrialResult]) -> Result<EvalReport> {
    if trials.is_empty() {
        return Err(Error::usage("no trials to aggregate"));
    }
    let column = |f: fn(&Prf) -> f64| mean_std(&trials.iter().map(|t| f(&t.scores)).collect::<Vec<_>>());
    let (p, p_sd) = column(|s| s.precision);
    let (r, r_sd) = column(|s| s.recall);
    let (f, f_sd) = column(|s| s.f1);
    Ok(EvalReport {
        trials: trials.to_vec(),
        mean: Prf {
            precision: p,
            recall: r,
            f1: f,
        },
        std: Prf {
            precision: p_sd,
            recall: r_sd,
            f1: f_sd,
        },
    })
}

impl EvalReport {
    /// Tab-separated table: a header, one row per trial, then a
    /// `mean ± std` summary row.
    pub fn to_text(&self) -> String {
        let mut out = String::from("trial\tseed\tmatched\tpredicted\tgold\tf1\tprecision\trecall\n");
        for (i, t) in self.trials.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                i + 1,
                t.seed,
                t.counts.matched,
                t.counts.predicted,
                t.counts.gold,
                t.scores.f1,
                t.scores.precision,
                t.scores.recall
            );
        }
        let _ = writeln!(
            out,
            "mean ± std\t-\t-\t-\t-\t{:.4} ± {:.4}\t{:.4} ± {:.4}\t{:.4} ± {:.4}",
            self.mean.f1, self.std.f1, self.mean.precision, self.std.precision, self.mean.recall, self.std.recall
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SpanLabel::*;

    fn s(start: usize, end: usize) -> Span {
        Span::new(start, end, Adr)
    }

    #[test]
    fn match_examples() {
        assert_eq!(
            approximate_match(&[s(1, 3)], &[s(2, 6)], false),
            MatchCounts { matched: 1, predicted: 1, gold: 1 }
        );
        assert_eq!(approximate_match(&[s(0, 1)], &[s(5, 6)], false).matched, 0);

        // "... because weight gain is not cool": gold over weight gain, prediction on gain only
        let gold = [s(15, 17)];
        assert_eq!(approximate_match(&[s(16, 17)], &gold, false).matched, 1);
    }

    #[test]
    fn indication_excluded_unless_enabled() {
        let pred = [Span::new(0, 2, Indication), s(4, 5)];
        let gold = [Span::new(1, 2, Indication), s(6, 7)];
        assert_eq!(
            approximate_match(&pred, &gold, false),
            MatchCounts { matched: 0, predicted: 1, gold: 1 }
        );
        assert_eq!(
            approximate_match(&pred, &gold, true),
            MatchCounts { matched: 1, predicted: 2, gold: 2 }
        );
        // same tokens, different label
        assert_eq!(approximate_match(&[Span::new(0, 2, Indication)], &[s(0, 2)], true).matched, 0);
    }

    #[test]
    fn one_prediction_matches_one_gold() {
        let counts = approximate_match(&[s(0, 10)], &[s(1, 2), s(4, 6)], false);
        assert_eq!(counts, MatchCounts { matched: 1, predicted: 1, gold: 2 });
    }

    #[test]
    fn prf_examples() {
        let p = prf(MatchCounts { matched: 3, predicted: 4, gold: 5 });
        assert!((p.precision - 0.75).abs() < 1e-12);
        assert!((p.recall - 0.6).abs() < 1e-12);
        assert!((p.f1 - 2.0 * 0.45 / 1.35).abs() < 1e-12);
        assert_eq!(prf(MatchCounts { matched: 0, predicted: 0, gold: 3 }), Prf::default());
        let all = prf(MatchCounts { matched: 4, predicted: 4, gold: 4 });
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
    }

    fn trial(f1: f64) -> TrialResult {
        TrialResult {
            seed: 0,
            counts: MatchCounts::default(),
            scores: Prf { precision: f1, recall: f1, f1 },
        }
    }

    #[test]
    fn aggregate_examples() {
        let same = aggregate_trials(&[trial(0.5), trial(0.5), trial(0.5)]).unwrap();
        assert_eq!(same.std.f1, 0.0);
        let two = aggregate_trials(&[trial(0.7), trial(0.8)]).unwrap();
        assert!((two.mean.f1 - 0.75).abs() < 1e-12);
        // sqrt(((0.05)^2 * 2) / 1)
        assert!((two.std.f1 - 0.070_710_678_118_654_75).abs() < 1e-12);
        let one = aggregate_trials(&[trial(0.42)]).unwrap();
        assert_eq!((one.mean.f1, one.std.f1), (0.42, 0.0));
        assert!(aggregate_trials(&[]).is_err());
    }

    #[test]
    fn report_has_summary_row() {
        let report = aggregate_trials(&[trial(0.7), trial(0.8)]).unwrap();
        let text = report.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean ± std"));
        assert!(lines[3].contains("0.7500 ± 0.0707"));
    }

    fn spans_strategy() -> impl Strategy<Value = Vec<Span>> {
        prop::collection::vec((0usize..3, 1usize..4, any::<bool>()), 0..6).prop_map(|parts| {
            let mut out = Vec::new();
            let mut cur = 0;
            for (gap, w, adr) in parts {
                let start = cur + gap;
                out.push(Span::new(start, start + w, if adr { Adr } else { Indication }));
                cur = start + w;
            }
            out
        })
    }

    proptest! {
        #[test]
        fn exact_prediction_scores_one(gold in spans_strategy()) {
            let counts = approximate_match(&gold, &gold, true);
            if counts.gold > 0 {
                let p = prf(counts);
                prop_assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
            }
        }

        #[test]
        fn order_does_not_matter(pred in spans_strategy(), gold in spans_strategy()) {
            let mut rp = pred.clone();
            let mut rg = gold.clone();
            rp.reverse();
            rg.reverse();
            prop_assert_eq!(approximate_match(&pred, &gold, false), approximate_match(&rp, &rg, false));
        }

        #[test]
        fn counts_are_consistent(pred in spans_strategy(), gold in spans_strategy()) {
            let c = approximate_match(&pred, &gold, true);
            prop_assert!(c.matched <= c.predicted && c.matched <= c.gold);
        }
    }
}
