//! Pseudo-labels from stochastic model rollouts: majority vote with an agreement filter.
//!
//! Rollout files are JSON Lines, one object per example:
//!
//! ```json
//! {"example_id": "clip-001", "rollouts": ["dog", "dog", null, "cat"]}
//! ```
//!
//! `null` marks a rollout whose generation could not be mapped to a class (abstain).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureSet, Manifest, TrainSet};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutSet {
    pub example_ids: Vec<String>,
    /// `[N][M]` class indices; `None` is an abstention.
    pub rollouts: Vec<Vec<Option<usize>>>,
    pub num_rollouts: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RolloutLine {
    example_id: String,
    rollouts: Vec<Option<String>>,
}

impl RolloutSet {
    pub fn new(example_ids: Vec<String>, rollouts: Vec<Vec<Option<usize>>>, num_classes: usize) -> Result<Self> {
        if example_ids.len() != rollouts.len() {
            return Err(Error::LengthMismatch(format!(
                "{} example ids but {} rollout rows",
                example_ids.len(),
                rollouts.len()
            )));
        }
        let m = rollouts.first().map_or(0, Vec::len);
        if rollouts.is_empty() || m == 0 {
            return Err(Error::EmptyInput("rollout set needs at least one example and one rollout"));
        }
        let mut seen = HashSet::new();
        for (n, (id, row)) in example_ids.iter().zip(&rollouts).enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate rollout example id {id:?}")));
            }
            if row.len() != m {
                return Err(Error::LengthMismatch(format!(
                    "example {id:?} has {} rollouts, expected {m}",
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().flatten().find(|&&c| c >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    example: n,
                    label: *bad,
                    num_classes,
                });
            }
        }
        Ok(Self {
            example_ids,
            rollouts,
            num_rollouts: m,
        })
    }

    /// Parses a JSON Lines rollout file, resolving class names against `manifest`.
    pub fn load(path: &Path, manifest: &Manifest) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: HashMap<&str, usize> = manifest
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Rollout {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let parsed: RolloutLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let row = parsed
                .rollouts
                .iter()
                .map(|r| match r {
                    None => Ok(None),
                    Some(name) => index
                        .get(name.as_str())
                        .map(|&c| Some(c))
                        .ok_or_else(|| bad(format!("unknown class name {name:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            ids.push(parsed.example_id);
            rows.push(row);
        }
        Self::new(ids, rows, manifest.num_classes())
    }
}

/// How abstentions enter the agreement fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainPolicy {
    /// Agreement = top count / M; abstentions count against agreement.
    #[default]
    CountAgainst,
    /// Agreement = top count / non-abstaining rollouts.
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    BelowThreshold,
    PluralityTie,
    AllAbstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptExample {
    pub example_id: String,
    pub label: usize,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedExample {
    pub example_id: String,
    pub reason: DropReason,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub threshold: f64,
    pub kept: Vec<KeptExample>,
    pub dropped: Vec<DroppedExample>,
}

pub fn filter_pseudo_labels(rs: &RolloutSet, threshold: f64) -> Result<PseudoLabelSet> {
    filter_pseudo_labels_with(rs, threshold, AbstainPolicy::default())
}

pub fn filter_pseudo_labels_with(
    rs: &RolloutSet,
    threshold: f64,
    policy: AbstainPolicy,
) -> Result<PseudoLabelSet> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidThreshold(threshold));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (id, row) in rs.example_ids.iter().zip(&rs.rollouts) {
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for &class in row.iter().flatten() {
            match counts.iter_mut().find(|(c, _)| *c == class) {
                Some((_, n)) => *n += 1,
                None => counts.push((class, 1)),
            }
        }
        let voted: usize = counts.iter().map(|&(_, n)| n).sum();
        let top = counts.iter().map(|&(_, n)| n).max().unwrap_or(0);
        let denom = match policy {
            AbstainPolicy::CountAgainst => row.len(),
            AbstainPolicy::Exclude => voted,
        };
        let agreement = if denom == 0 { 0.0 } else { top as f64 / denom as f64 };
        let leaders: Vec<usize> = counts.iter().filter(|&&(_, n)| n == top).map(|&(c, _)| c).collect();
        let reason = if voted == 0 {
            Some(DropReason::AllAbstain)
        } else if agreement < threshold {
            Some(DropReason::BelowThreshold)
        } else if leaders.len() > 1 {
            Some(DropReason::PluralityTie)
        } else {
            None
        };
        match reason {
            None => kept.push(KeptExample {
                example_id: id.clone(),
                label: leaders[0],
                agreement,
            }),
            Some(reason) => dropped.push(DroppedExample {
                example_id: id.clone(),
                reason,
                agreement,
            }),
        }
    }
    Ok(PseudoLabelSet {
        threshold,
        kept,
        dropped,
    })
}

/// Binds kept examples to their pseudo-labels. When `pool` is given only kept examples
/// whose feature index is in `pool` are used. Every class must survive unless
/// `allow_missing_classes` is set.
pub fn build_pseudo_split(
    pl: &PseudoLabelSet,
    fs: &FeatureSet,
    pool: Option<&[usize]>,
    allow_missing_classes: bool,
) -> Result<TrainSet> {
    let ids: HashMap<&str, usize> = fs
        .manifest()
        .example_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let pool: Option<HashSet<usize>> = pool.map(|p| p.iter().copied().collect());
    let mut pairs = Vec::with_capacity(pl.kept.len());
    for kept in &pl.kept {
        let index = *ids
            .get(kept.example_id.as_str())
            .ok_or_else(|| Error::UnknownExample(kept.example_id.clone()))?;
        if kept.label >= fs.num_classes() {
            return Err(Error::LabelOutOfRange {
                example: index,
                label: kept.label,
                num_classes: fs.num_classes(),
            });
        }
        if pool.as_ref().is_none_or(|p| p.contains(&index)) {
            pairs.push((index, kept.label));
        }
    }
    let train = TrainSet::new(pairs);
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    for (class, &n) in train.class_counts(fs.num_classes()).iter().enumerate() {
        if n == 0 {
            let name = fs.manifest().class_names[class].clone();
            if !allow_missing_classes {
                return Err(Error::ClassVanished { class, name });
            }
            warn!("class {class} ({name}) has no pseudo-labelled examples");
        }
    }
    Ok(train)
}
