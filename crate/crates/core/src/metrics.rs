//! Rouge-1/2/L and classification accuracy.
//!
//! Tokens are lowercased alphanumeric runs; no stemming or stopword removal.
//! Rouge-L uses the plain harmonic mean (beta = 1).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, TaskKind};
use crate::synthesis::normalize_for_dedup;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot aggregate Rouge over zero pairs")]
    NoPairs,
    #[error("prediction/gold size mismatch: {predictions} vs {gold}")]
    SizeMismatch { predictions: usize, gold: usize },
    #[error("prediction id {0:?} has no gold counterpart")]
    IdMismatch(String),
    #[error("example {0:?} has no output")]
    MissingOutput(String),
    #[error("metrics report: {0}")]
    Parse(String),
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    #[serde(rename = "p")]
    pub precision: f64,
    #[serde(rename = "r")]
    pub recall: f64,
    #[serde(rename = "f")]
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let precision = if candidate_total == 0 {
            0.0
        } else {
            overlap as f64 / candidate_total as f64
        };
        let recall = if reference_total == 0 {
            0.0
        } else {
            overlap as f64 / reference_total as f64
        };
        Self::from_pr(precision, recall)
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap, candidate n-gram count, reference n-gram count.
fn ngram_overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap = c
        .iter()
        .map(|(gram, &k)| k.min(r.get(gram).copied().unwrap_or(0)))
        .sum();
    (overlap, c.values().sum(), r.values().sum())
}

/// Rouge-N over tokenized text. Meaningful for `n >= 1`.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Prf {
    let (o, c, r) = ngram_overlap(&tokenize(candidate), &tokenize(reference), n);
    Prf::from_counts(o, c, r)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    Prf::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
}

impl RougeScore {
    pub fn pair(candidate: &str, reference: &str) -> Self {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        let (o1, c1, r1) = ngram_overlap(&c, &r, 1);
        let (o2, c2, r2) = ngram_overlap(&c, &r, 2);
        Self {
            rouge1: Prf::from_counts(o1, c1, r1),
            rouge2: Prf::from_counts(o2, c2, r2),
            rouge_l: Prf::from_counts(lcs_len(&c, &r), c.len(), r.len()),
        }
    }

    /// Best score per metric (by F1) over several references.
    pub fn multi_reference(candidate: &str, references: &[&str]) -> Self {
        let best = |get: fn(&RougeScore) -> Prf, scores: &[RougeScore]| {
            scores
                .iter()
                .map(get)
                .fold(Prf::default(), |acc, p| if p.f1 > acc.f1 { p } else { acc })
        };
        let scores: Vec<RougeScore> = references.iter().map(|r| Self::pair(candidate, r)).collect();
        Self {
            rouge1: best(|s| s.rouge1, &scores),
            rouge2: best(|s| s.rouge2, &scores),
            rouge_l: best(|s| s.rouge_l, &scores),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean of per-pair scores.
    #[default]
    Macro,
    /// Overlaps and totals summed over all pairs before dividing.
    Pooled,
}

pub fn corpus_rouge<C: AsRef<str>, R: AsRef<str>>(pairs: &[(C, R)]) -> Result<RougeScore, MetricsError> {
    corpus_rouge_with(pairs, Aggregation::Macro)
}

pub fn corpus_rouge_with<C: AsRef<str>, R: AsRef<str>>(
    pairs: &[(C, R)],
    aggregation: Aggregation,
) -> Result<RougeScore, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    match aggregation {
        Aggregation::Macro => {
            let mut sum = [[0.0f64; 3]; 3];
            for (c, r) in pairs {
                let s = RougeScore::pair(c.as_ref(), r.as_ref());
                for (acc, p) in sum.iter_mut().zip([s.rouge1, s.rouge2, s.rouge_l]) {
                    acc[0] += p.precision;
                    acc[1] += p.recall;
                    acc[2] += p.f1;
                }
            }
            let n = pairs.len() as f64;
            let mean = |a: [f64; 3]| Prf {
                precision: a[0] / n,
                recall: a[1] / n,
                f1: a[2] / n,
            };
            Ok(RougeScore {
                rouge1: mean(sum[0]),
                rouge2: mean(sum[1]),
                rouge_l: mean(sum[2]),
            })
        }
        Aggregation::Pooled => {
            let mut totals = [[0usize; 3]; 3];
            for (c, r) in pairs {
                let c = tokenize(c.as_ref());
                let r = tokenize(r.as_ref());
                let l = (lcs_len(&c, &r), c.len(), r.len());
                for (acc, (o, cc, rr)) in totals.iter_mut().zip([ngram_overlap(&c, &r, 1), ngram_overlap(&c, &r, 2), l]) {
                    acc[0] += o;
                    acc[1] += cc;
                    acc[2] += rr;
                }
            }
            let prf = |t: [usize; 3]| Prf::from_counts(t[0], t[1], t[2]);
            Ok(RougeScore {
                rouge1: prf(totals[0]),
                rouge2: prf(totals[1]),
                rouge_l: prf(totals[2]),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl AccuracyReport {
    pub fn new(correct: usize, total: usize) -> Self {
        let accuracy = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        Self {
            correct,
            total,
            accuracy,
        }
    }
}

/// Exact-match accuracy over id-aligned prediction and gold sets.
pub fn accuracy(predictions: &[Example], gold: &[Example], normalize: bool) -> Result<AccuracyReport, MetricsError> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::SizeMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    let gold_by_id: HashMap<&str, &Example> = gold.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut correct = 0;
    for p in predictions {
        let g = gold_by_id
            .get(p.id.as_str())
            .ok_or_else(|| MetricsError::IdMismatch(p.id.clone()))?;
        let po = p.output.as_deref().ok_or_else(|| MetricsError::MissingOutput(p.id.clone()))?;
        let go = g.output.as_deref().ok_or_else(|| MetricsError::MissingOutput(g.id.clone()))?;
        let hit = if normalize {
            normalize_for_dedup(po) == normalize_for_dedup(go)
        } else {
            po == go
        };
        if hit {
            correct += 1;
        }
    }
    Ok(AccuracyReport::new(correct, predictions.len()))
}

/// Scores id-aligned predictions: accuracy for classification, macro
/// corpus Rouge for generation.
pub fn evaluate(predictions: &[Example], gold: &[Example], kind: TaskKind) -> Result<MetricsReport, MetricsError> {
    match kind {
        TaskKind::Classification => Ok(MetricsReport::Accuracy(accuracy(predictions, gold, true)?)),
        TaskKind::Generation => {
            if predictions.len() != gold.len() {
                return Err(MetricsError::SizeMismatch {
                    predictions: predictions.len(),
                    gold: gold.len(),
                });
            }
            let gold_by_id: HashMap<&str, &Example> = gold.iter().map(|g| (g.id.as_str(), g)).collect();
            let mut pairs = Vec::with_capacity(predictions.len());
            for p in predictions {
                let g = gold_by_id
                    .get(p.id.as_str())
                    .ok_or_else(|| MetricsError::IdMismatch(p.id.clone()))?;
                let po = p.output.as_deref().ok_or_else(|| MetricsError::MissingOutput(p.id.clone()))?;
                let go = g.output.as_deref().ok_or_else(|| MetricsError::MissingOutput(g.id.clone()))?;
                pairs.push((po, go));
            }
            Ok(MetricsReport::Rouge(corpus_rouge(&pairs)?))
        }
    }
}

/// Report schema shared by evaluation output and trainer `metrics.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricsReport {
    Rouge(RougeScore),
    Accuracy(AccuracyReport),
}

impl MetricsReport {
    pub fn is_accuracy(&self) -> bool {
        matches!(self, MetricsReport::Accuracy(_))
    }

    /// Headline number used for ranking: accuracy, or Rouge-L F1.
    pub fn primary(&self) -> f64 {
        match self {
            MetricsReport::Accuracy(a) => a.accuracy,
            MetricsReport::Rouge(r) => r.rouge_l.f1,
        }
    }

    /// Percent columns, two decimals: `[acc]` or `[R-1, R-2, R-L]` F1.
    pub fn percent_columns(&self) -> Vec<String> {
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        match self {
            MetricsReport::Accuracy(a) => vec![pct(a.accuracy)],
            MetricsReport::Rouge(r) => vec![pct(r.rouge1.f1), pct(r.rouge2.f1), pct(r.rouge_l.f1)],
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsReport::Accuracy(a) => {
                write!(f, "accuracy {:.2}% ({}/{})", a.accuracy * 100.0, a.correct, a.total)
            }
            MetricsReport::Rouge(r) => {
                writeln!(f, "{:<8} {:>8} {:>8} {:>8}", "metric", "P", "R", "F")?;
                for (name, p) in [("R-1", r.rouge1), ("R-2", r.rouge2), ("R-L", r.rouge_l)] {
                    writeln!(
                        f,
                        "{:<8} {:>8.2} {:>8.2} {:>8.2}",
                        name,
                        p.precision * 100.0,
                        p.recall * 100.0,
                        p.f1 * 100.0
                    )?;
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("The cat, sat!"), vec!["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("ISBN 0-7156-3648-0"), vec!["isbn", "0", "7156", "3648", "0"]);
    }

    #[test]
    fn identical_strings_score_one() {
        let s = RougeScore::pair("the quick brown fox", "the quick brown fox");
        for p in [s.rouge1, s.rouge2, s.rouge_l] {
            assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn police_example() {
        let r1 = rouge_n("police killed the gunman", "police kill the gunman", 1);
        assert_eq!((r1.precision, r1.recall, r1.f1), (0.75, 0.75, 0.75));
        let r2 = rouge_n("police killed the gunman", "police kill the gunman", 2);
        assert_eq!(r2.precision, 1.0 / 3.0);
        assert_eq!(r2.recall, 1.0 / 3.0);
        assert!((r2.f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rouge_l_reordered() {
        let p = rouge_l("a b c d", "a c b d");
        assert_eq!((p.precision, p.recall), (0.75, 0.75));
        assert_eq!(rouge_l("", "a b"), Prf::default());
    }

    #[test]
    fn clipping_limits_repeats() {
        let p = rouge_n("the the the", "the cat", 1);
        assert_eq!(p.precision, 1.0 / 3.0);
        assert_eq!(p.recall, 0.5);
    }

    #[test]
    fn corpus_mean() {
        let single = corpus_rouge(&[("a b", "a c")]).unwrap();
        assert_eq!(single, RougeScore::pair("a b", "a c"));
        let two = corpus_rouge(&[("a b", "a b"), ("x", "y")]).unwrap();
        assert_eq!(two.rouge1.f1, 0.5);
        assert_eq!(corpus_rouge::<&str, &str>(&[]), Err(MetricsError::NoPairs));
    }

    #[test]
    fn pooled_aggregation_sums_counts() {
        let pooled = corpus_rouge_with(&[("a b", "a b"), ("x y z w", "q")], Aggregation::Pooled).unwrap();
        assert_eq!(pooled.rouge1.precision, 2.0 / 6.0);
        assert_eq!(pooled.rouge1.recall, 2.0 / 3.0);
    }

    #[test]
    fn multi_reference_takes_best() {
        let s = RougeScore::multi_reference("a b c", &["x y", "a b c"]);
        assert_eq!(s.rouge1.f1, 1.0);
    }

    fn ex(id: &str, out: &str) -> Example {
        Example::labeled(id, "in", out)
    }

    #[test]
    fn accuracy_cases() {
        let g = vec![ex("1", "yes"), ex("2", "no")];
        assert_eq!(accuracy(&g, &g, false).unwrap().accuracy, 1.0);
        let empty = accuracy(&[], &[], true).unwrap();
        assert_eq!((empty.total, empty.accuracy), (0, 0.0));

        let gold = vec![ex("1", "yes"), ex("2", "no"), ex("3", "yes"), ex("4", "yes")];
        let pred = vec![ex("1", "yes"), ex("2", "no"), ex("3", "Yes "), ex("4", "no")];
        assert_eq!(accuracy(&pred, &gold, true).unwrap().accuracy, 0.75);
        assert_eq!(accuracy(&pred, &gold, false).unwrap().accuracy, 0.5);
    }

    #[test]
    fn accuracy_aligns_by_id() {
        let gold = vec![ex("1", "a"), ex("2", "b")];
        let pred = vec![ex("2", "b"), ex("1", "a")];
        assert_eq!(accuracy(&pred, &gold, false).unwrap().correct, 2);
        let bad = vec![ex("1", "a"), ex("9", "b")];
        assert_eq!(accuracy(&bad, &gold, false), Err(MetricsError::IdMismatch("9".into())));
        assert!(matches!(
            accuracy(&bad[..1], &gold, false),
            Err(MetricsError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn report_json_shapes() {
        let acc = MetricsReport::Accuracy(AccuracyReport::new(3, 4));
        let v: serde_json::Value = serde_json::to_value(acc).unwrap();
        assert_eq!(v["correct"], 3);
        assert_eq!(v["accuracy"], 0.75);
        let r = MetricsReport::Rouge(RougeScore::pair("a b", "a b"));
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        assert_eq!(v["rougeL"]["f"], 1.0);
        assert_eq!(v["rouge2"]["p"], 1.0);
        let back: MetricsReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
        assert_eq!(acc.percent_columns(), vec!["75.00"]);
    }
}
