//! Uniform-voting baseline: rank heads by nearest-centroid training accuracy, keep the
//! top-k, and predict by hard majority vote.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototype::{argmax, ScoreTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    pub accuracy: Vec<f64>,
    /// Selected heads, best first.
    pub selected: Vec<usize>,
}

/// Nearest-centroid accuracy of each head on the rows of `scores`, whose true
/// labels are `labels` (one per row).
pub fn head_accuracy(scores: &ScoreTensor, labels: &[usize]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if labels.len() != scores.len() {
        return Err(Error::LengthMismatch(format!(
            "{} score rows but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len() as f64;
    Ok((0..scores.num_heads)
        .map(|head| {
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(r, &y)| argmax(scores.row(r, head)) == y)
                .count();
            hits as f64 / n
        })
        .collect())
}

/// Indices of the `k` largest values (ties to the lower index), best first.
/// `k` is clamped to `values.len()`.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k.min(values.len()));
    order
}

pub fn select_topk_heads(accuracy: &[f64], k: usize) -> Result<HeadRanking> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if accuracy.is_empty() {
        return Err(Error::EmptySelection);
    }
    if k > accuracy.len() {
        warn!("k = {k} exceeds the {} available heads; using all heads", accuracy.len());
    }
    Ok(HeadRanking {
        accuracy: accuracy.to_vec(),
        selected: top_k_indices(accuracy, k),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VotePrediction {
    pub predictions: Vec<usize>,
    /// `[rows][C]` vote counts.
    pub votes: Vec<u32>,
    pub num_classes: usize,
}

impl VotePrediction {
    pub fn votes_for(&self, r: usize) -> &[u32] {
        &self.votes[r * self.num_classes..(r + 1) * self.num_classes]
    }
}

pub fn majority_vote_predict(scores: &ScoreTensor, ranking: &HeadRanking) -> Result<VotePrediction> {
    if ranking.selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    if let Some(&h) = ranking.selected.iter().find(|&&h| h >= scores.num_heads) {
        return Err(Error::ShapeMismatch(format!(
            "selected head {h} but scores have {} heads",
            scores.num_heads
        )));
    }
    let c = scores.num_classes;
    let mut votes = vec![0u32; scores.len() * c];
    let mut predictions = Vec::with_capacity(scores.len());
    for (r, counts) in votes.chunks_exact_mut(c).enumerate() {
        for &head in &ranking.selected {
            counts[argmax(scores.row(r, head))] += 1;
        }
        let mut best = 0;
        for (class, &v) in counts.iter().enumerate() {
            if v > counts[best] {
                best = class;
            }
        }
        predictions.push(best);
    }
    Ok(VotePrediction {
        predictions,
        votes,
        num_classes: c,
    })
}
