//! Accuracy, macro-F1 and per-class precision/recall from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no labelled test examples"));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `matrix[true][pred]` counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        check(preds, labels)?;
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
            if p >= num_classes || l >= num_classes {
                return Err(Error::LabelOutOfRange {
                    example: i,
                    label: p.max(l),
                    num_classes,
                });
            }
            counts[l][p] += 1;
        }
        Ok(Self { num_classes, counts })
    }

    pub fn true_positives(&self, class: usize) -> usize {
        self.counts[class][class]
    }

    pub fn predicted(&self, class: usize) -> usize {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn actual(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-class precision, recall and F1. Any undefined ratio counts as 0.
pub fn per_class_scores(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (0..cm.num_classes)
        .map(|c| {
            let tp = cm.true_positives(c);
            let precision = ratio(tp, cm.predicted(c));
            let recall = ratio(tp, cm.actual(c));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: cm.actual(c),
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over all `num_classes` classes.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let cm = ConfusionMatrix::new(preds, labels, num_classes)?;
    let scores = per_class_scores(&cm);
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / num_classes as f64)
}

/// Exact match over groups of queries: a group counts as correct only when all of its
/// queries are. Groups are keyed by the prefix of the example id before `separator`
/// (ids without it form singleton groups).
pub fn grouped_exact_match(ids: &[&str], preds: &[usize], labels: &[usize], separator: &str) -> Result<f64> {
    check(preds, labels)?;
    if ids.len() != preds.len() {
        return Err(Error::LengthMismatch(format!("{} ids for {} predictions", ids.len(), preds.len())));
    }
    let mut groups: std::collections::BTreeMap<&str, bool> = std::collections::BTreeMap::new();
    for ((id, p), l) in ids.iter().zip(preds).zip(labels) {
        let key = id.split_once(separator).map_or(*id, |(head, _)| head);
        let ok = groups.entry(key).or_insert(true);
        *ok &= p == l;
    }
    Ok(groups.values().filter(|&&ok| ok).count() as f64 / groups.len() as f64)
}
