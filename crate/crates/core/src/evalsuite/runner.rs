//! Fit and predict for each variant, and the end-to-end evaluation run.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::calm::{self, ReliabilityKind, ReliabilityMatrix, WeightMatrix};
use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::evalsuite::metrics::{self, ClassScores, ConfusionMatrix};
use crate::feature_store::{sample_shots, FeatureSet, TrainSet};
use crate::prototype::{self, CentroidBank, Metric};
use crate::pseudo_label::{self, DropReason, PseudoLabelSet, RolloutSet};
use crate::sav::{self, HeadRanking};

/// Example ids sharing the prefix before this separator belong to one clip.
pub const CLIP_SEPARATOR: &str = "::";

/// Everything needed to classify new examples, except the centroids themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub variant: Variant,
    pub metric: Metric,
    pub reliability_kind: ReliabilityKind,
    pub tau_p: f64,
    pub k: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub class_names: Vec<String>,
    /// Manifest class index of each fitted class. Equal to `0..C` unless classes were
    /// missing from the training set.
    pub active_classes: Vec<usize>,
    pub ranking: Option<HeadRanking>,
    pub reliability: Option<ReliabilityMatrix>,
    pub weights: Option<WeightMatrix>,
}

impl FittedModel {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn missing_classes(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|c| !self.active_classes.contains(c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub model: FittedModel,
    pub bank: CentroidBank,
    pub train_zero_norm_count: usize,
}

pub fn fit(fs: &FeatureSet, train: &TrainSet, cfg: &RunConfig) -> Result<Fitted> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let c = fs.num_classes();
    let counts = train.class_counts(c);
    let active: Vec<usize> = (0..c).filter(|&cl| counts[cl] > 0).collect();
    if active.len() < c {
        let class = (0..c).find(|cl| counts[*cl] == 0).expect("a class is missing");
        let name = fs.manifest().class_names[class].clone();
        if !cfg.allow_missing_classes {
            return Err(Error::EmptyClass { class, name });
        }
        warn!(
            "{} of {c} classes have no training examples; fitting the remaining {}",
            c - active.len(),
            active.len()
        );
    }
    if active.len() < 2 {
        return Err(Error::SingleClass(active.len()));
    }
    let mut remap = vec![usize::MAX; c];
    for (i, &cl) in active.iter().enumerate() {
        remap[cl] = i;
    }
    let local_train = TrainSet {
        indices: train.indices.clone(),
        labels: train.labels.iter().map(|&l| remap[l]).collect(),
    };

    let bank = prototype::compute_centroids_with_classes(fs, &local_train, active.len())?;
    let scores = prototype::similarity_scores(fs, &local_train.indices, &bank, cfg.metric)?;
    let k = cfg.topk.resolve(fs.num_heads());
    if let crate::config::TopK::Absolute(req) = cfg.topk {
        if req > fs.num_heads() {
            warn!("k = {req} exceeds the {} available heads; using all heads", fs.num_heads());
        }
    }

    let (mut ranking, mut reliability, mut weights) = (None, None, None);
    match cfg.variant {
        Variant::Sav => {
            let acc = sav::head_accuracy(&scores, &local_train.labels)?;
            ranking = Some(sav::select_topk_heads(&acc, k)?);
        }
        Variant::CalmGlobal | Variant::CalmLocal => {
            let post = prototype::head_posteriors(&scores, cfg.tau_p)?;
            let ev = calm::evidence(cfg.reliability, &scores, &post, &local_train.labels)?;
            let rel = if cfg.variant == Variant::CalmGlobal {
                calm::global_reliability(&ev)?
            } else {
                calm::local_reliability(&ev)?
            };
            let wm = calm::sparsify_and_weight(&rel, k, cfg.tau_w)?;
            for &cl in &wm.undiscriminated_classes {
                warn!(
                    "no discriminative head found for class {:?}",
                    fs.manifest().class_names[active[cl]]
                );
            }
            reliability = Some(rel);
            weights = Some(wm);
        }
    }
    info!(
        "fitted {} on {} examples, k = {k} of {} heads",
        cfg.variant,
        train.len(),
        fs.num_heads()
    );
    Ok(Fitted {
        model: FittedModel {
            variant: cfg.variant,
            metric: cfg.metric,
            reliability_kind: cfg.reliability,
            tau_p: cfg.tau_p,
            k,
            num_heads: fs.num_heads(),
            head_dim: fs.head_dim(),
            class_names: fs.manifest().class_names.clone(),
            active_classes: active,
            ranking,
            reliability,
            weights,
        },
        bank,
        train_zero_norm_count: scores.zero_norm_count,
    })
}

/// Predictions over manifest classes. Classes absent from the fit score 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub rows: Vec<usize>,
    pub predicted: Vec<usize>,
    /// `[rows][C]`: vote fractions (sav) or aggregate weighted posteriors (calm).
    pub scores: Vec<f64>,
    pub num_classes: usize,
    pub zero_norm_count: usize,
}

impl Predictions {
    pub fn scores_for(&self, r: usize) -> &[f64] {
        &self.scores[r * self.num_classes..(r + 1) * self.num_classes]
    }
}

pub fn predict(
    fs: &FeatureSet,
    rows: &[usize],
    model: &FittedModel,
    bank: &CentroidBank,
) -> Result<Predictions> {
    if fs.num_classes() != model.num_classes() || fs.manifest().class_names != model.class_names {
        return Err(Error::InvalidManifest(
            "feature set class names differ from the fitted model's".into(),
        ));
    }
    let scores = prototype::similarity_scores(fs, rows, bank, model.metric)?;
    let c_fit = model.active_classes.len();
    let (local_pred, local_scores) = match model.variant {
        Variant::Sav => {
            let ranking = model.ranking.as_ref().ok_or(Error::EmptySelection)?;
            let vp = sav::majority_vote_predict(&scores, ranking)?;
            let k = ranking.selected.len() as f64;
            let fractions = vp.votes.iter().map(|&v| f64::from(v) / k).collect();
            (vp.predictions, fractions)
        }
        Variant::CalmGlobal | Variant::CalmLocal => {
            let wm = model.weights.as_ref().ok_or(Error::EmptySelection)?;
            let post = prototype::head_posteriors(&scores, model.tau_p)?;
            let wp = calm::weighted_predict(&post, wm)?;
            (wp.predictions, wp.scores)
        }
    };
    let c = model.num_classes();
    let mut full = vec![0.0; rows.len() * c];
    for (dst, src) in full.chunks_exact_mut(c).zip(local_scores.chunks_exact(c_fit)) {
        for (&cl, &v) in model.active_classes.iter().zip(src) {
            dst[cl] = v;
        }
    }
    Ok(Predictions {
        rows: rows.to_vec(),
        predicted: local_pred.into_iter().map(|p| model.active_classes[p]).collect(),
        scores: full,
        num_classes: c,
        zero_norm_count: scores.zero_norm_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    #[serde(flatten)]
    pub scores: ClassScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub num_scored: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Exact match over clips (ids grouped by the prefix before `::`).
    pub clip_exact_match: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

pub fn score(
    fs: &FeatureSet,
    rows: &[usize],
    predicted: &[usize],
) -> Result<Option<Metrics>> {
    let Some(labels) = fs.labels() else {
        return Ok(None);
    };
    if rows.is_empty() {
        warn!("test set is empty; no metrics reported");
        return Ok(None);
    }
    let truth: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let c = fs.num_classes();
    let cm = ConfusionMatrix::new(predicted, &truth, c)?;
    let per_class = metrics::per_class_scores(&cm)
        .into_iter()
        .enumerate()
        .map(|(class, scores)| ClassMetrics {
            class,
            name: fs.manifest().class_names[class].clone(),
            scores,
        })
        .collect();
    let ids: Vec<&str> = rows.iter().map(|&i| fs.example_id(i)).collect();
    Ok(Some(Metrics {
        num_scored: rows.len(),
        accuracy: metrics::accuracy(predicted, &truth)?,
        macro_f1: metrics::macro_f1(predicted, &truth, c)?,
        clip_exact_match: metrics::grouped_exact_match(&ids, predicted, &truth, CLIP_SEPARATOR)?,
        per_class,
        confusion: cm,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSummary {
    pub threshold: f64,
    pub num_rollouts: usize,
    pub kept: usize,
    pub dropped_below_threshold: usize,
    pub dropped_plurality_tie: usize,
    pub dropped_all_abstain: usize,
    /// Kept examples used for fitting (those inside the training pool).
    pub used_for_training: usize,
    /// Fraction of used pseudo-labels matching ground truth, when labels are known.
    pub label_accuracy: Option<f64>,
}

impl PseudoLabelSummary {
    fn new(pl: &PseudoLabelSet, num_rollouts: usize, train: &TrainSet, fs: &FeatureSet) -> Self {
        let count = |r: DropReason| pl.dropped.iter().filter(|d| d.reason == r).count();
        let label_accuracy = fs.labels().filter(|_| !train.is_empty()).map(|labels| {
            let hits = train
                .indices
                .iter()
                .zip(&train.labels)
                .filter(|&(&i, &l)| labels[i] == l)
                .count();
            hits as f64 / train.len() as f64
        });
        Self {
            threshold: pl.threshold,
            num_rollouts,
            kept: pl.kept.len(),
            dropped_below_threshold: count(DropReason::BelowThreshold),
            dropped_plurality_tie: count(DropReason::PluralityTie),
            dropped_all_abstain: count(DropReason::AllAbstain),
            used_for_training: train.len(),
            label_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Cosine evaluations with a zero-norm vector, scored as similarity 0.
    pub zero_norm_similarities: usize,
    pub undiscriminated_classes: Vec<String>,
    pub missing_classes: Vec<String>,
    pub topk_clamped: bool,
}

/// Result of one end-to-end run.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionReport {
    pub config: RunConfig,
    pub train: TrainSet,
    pub fitted: Fitted,
    pub predictions: Predictions,
    pub metrics: Option<Metrics>,
    pub pseudo_labels: Option<PseudoLabelSummary>,
    pub diagnostics: Diagnostics,
}

/// Fits on `train`, predicts `test`, and scores the predictions against ground truth.
pub fn run_variant(
    fs: &FeatureSet,
    train: &TrainSet,
    test: &[usize],
    cfg: &RunConfig,
) -> Result<PredictionReport> {
    let fitted = fit(fs, train, cfg)?;
    let predictions = predict(fs, test, &fitted.model, &fitted.bank)?;
    let metrics = score(fs, test, &predictions.predicted)?;
    let names = &fs.manifest().class_names;
    let model = &fitted.model;
    let diagnostics = Diagnostics {
        zero_norm_similarities: fitted.train_zero_norm_count + predictions.zero_norm_count,
        undiscriminated_classes: model
            .weights
            .as_ref()
            .map(|w| {
                w.undiscriminated_classes
                    .iter()
                    .map(|&c| names[model.active_classes[c]].clone())
                    .collect()
            })
            .unwrap_or_default(),
        missing_classes: model.missing_classes().into_iter().map(|c| names[c].clone()).collect(),
        topk_clamped: matches!(cfg.topk, crate::config::TopK::Absolute(k) if k > fs.num_heads()),
    };
    Ok(PredictionReport {
        config: cfg.clone(),
        train: train.clone(),
        fitted,
        predictions,
        metrics,
        pseudo_labels: None,
        diagnostics,
    })
}

/// Shot sampling, optional pseudo-labelling, then [`run_variant`].
///
/// With rollouts, the sampled training examples keep their features but take their
/// labels from the filtered rollouts; unlabelled feature sets train on every kept
/// example and predict the rest.
pub fn evaluate(fs: &FeatureSet, cfg: &RunConfig, rollouts: Option<&RolloutSet>) -> Result<PredictionReport> {
    cfg.validate()?;
    let Some(rs) = rollouts else {
        let split = sample_shots(fs, cfg.shots, cfg.seed)?;
        let train = split.train_set(fs)?;
        return run_variant(fs, &train, &split.test_indices, cfg);
    };
    let pl = pseudo_label::filter_pseudo_labels(rs, cfg.threshold)?;
    let (train, test) = if fs.labels().is_some() {
        let split = sample_shots(fs, cfg.shots, cfg.seed)?;
        let train =
            pseudo_label::build_pseudo_split(&pl, fs, Some(&split.train_indices), cfg.allow_missing_classes)?;
        (train, split.test_indices)
    } else {
        let train = pseudo_label::build_pseudo_split(&pl, fs, None, cfg.allow_missing_classes)?;
        let test = (0..fs.num_examples())
            .filter(|i| train.indices.binary_search(i).is_err())
            .collect();
        (train, test)
    };
    let mut report = run_variant(fs, &train, &test, cfg)?;
    report.pseudo_labels = Some(PseudoLabelSummary::new(&pl, rs.num_rollouts, &train, fs));
    Ok(report)
}
