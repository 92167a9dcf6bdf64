//! Margin-based head reliability and reliability-weighted soft voting.
//!
//! Each head's posterior over classes is scored on the training set by its clamped
//! margin: how far the target class's probability sits above the strongest competitor,
//! floored at zero. Averaging margins over all training examples gives one reliability
//! per head (global mode); averaging over the examples of each class gives a
//! class-conditional reliability (local mode). The top-k heads by reliability survive,
//! their reliabilities are softmaxed at temperature `tau_w`, and prediction is the argmax
//! of the weighted sum of head posteriors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototype::{argmax, softmax_into, PosteriorTensor, ScoreTensor};
use crate::sav::top_k_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    Global,
    Local,
}

/// Per-example head evidence that is averaged into a reliability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityKind {
    /// Clamped posterior margin of the target class.
    #[default]
    Margin,
    /// Margin ablation: 1 if the head's top-scoring class is the target, else 0.
    NoMargin,
    /// Margin ablation: target-class posterior without competitor subtraction.
    PosteriorMean,
}

impl std::str::FromStr for ReliabilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(Self::Margin),
            "no_margin" => Ok(Self::NoMargin),
            "posterior_mean" => Ok(Self::PosteriorMean),
            other => Err(Error::InvalidConfig(format!("unknown reliability {other:?}"))),
        }
    }
}

impl std::fmt::Display for ReliabilityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Margin => "margin",
            Self::NoMargin => "no_margin",
            Self::PosteriorMean => "posterior_mean",
        })
    }
}

/// `max(0, p[target] - max_{c != target} p[c])`.
pub fn clamped_margin(posterior: &[f64], target: usize) -> f64 {
    let competitor = posterior
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != target)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    (posterior[target] - competitor).max(0.0)
}

/// `[N_train][K]` per-example head evidence at each example's own label.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginTensor {
    pub num_heads: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub values: Vec<f64>,
}

impl MarginTensor {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_heads..(i + 1) * self.num_heads]
    }
}

fn check_labels(rows: usize, labels: &[usize], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::SingleClass(num_classes));
    }
    if labels.len() != rows {
        return Err(Error::LengthMismatch(format!("{rows} rows but {} labels", labels.len())));
    }
    if let Some(pos) = labels.iter().position(|&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            example: pos,
            label: labels[pos],
            num_classes,
        });
    }
    Ok(())
}

pub fn compute_margins(posteriors: &PosteriorTensor, labels: &[usize]) -> Result<MarginTensor> {
    check_labels(posteriors.len(), labels, posteriors.num_classes)?;
    let k = posteriors.num_heads;
    let values = labels
        .iter()
        .enumerate()
        .flat_map(|(r, &y)| (0..k).map(move |j| clamped_margin(posteriors.row(r, j), y)))
        .collect();
    Ok(MarginTensor {
        num_heads: k,
        num_classes: posteriors.num_classes,
        labels: labels.to_vec(),
        values,
    })
}

/// Full `[N][K][C]` margins with every class treated as the target in turn.
pub fn margin_table(posteriors: &PosteriorTensor) -> Vec<f64> {
    let c = posteriors.num_classes;
    posteriors
        .values
        .chunks_exact(c)
        .flat_map(|p| (0..c).map(move |t| clamped_margin(p, t)))
        .collect()
}

/// Margin ablation evidence: 1 where the head's top-scoring class is the label, else 0.
pub fn hit_evidence(scores: &ScoreTensor, labels: &[usize]) -> Result<MarginTensor> {
    check_labels(scores.len(), labels, scores.num_classes)?;
    let k = scores.num_heads;
    let values = labels
        .iter()
        .enumerate()
        .flat_map(|(r, &y)| (0..k).map(move |j| if argmax(scores.row(r, j)) == y { 1.0 } else { 0.0 }))
        .collect();
    Ok(MarginTensor {
        num_heads: k,
        num_classes: scores.num_classes,
        labels: labels.to_vec(),
        values,
    })
}

/// Margin ablation evidence: the label's posterior with no competitor subtraction.
pub fn target_posterior_evidence(posteriors: &PosteriorTensor, labels: &[usize]) -> Result<MarginTensor> {
    check_labels(posteriors.len(), labels, posteriors.num_classes)?;
    let k = posteriors.num_heads;
    let values = labels
        .iter()
        .enumerate()
        .flat_map(|(r, &y)| (0..k).map(move |j| posteriors.row(r, j)[y]))
        .collect();
    Ok(MarginTensor {
        num_heads: k,
        num_classes: posteriors.num_classes,
        labels: labels.to_vec(),
        values,
    })
}

/// Training evidence of the requested kind.
pub fn evidence(
    kind: ReliabilityKind,
    scores: &ScoreTensor,
    posteriors: &PosteriorTensor,
    labels: &[usize],
) -> Result<MarginTensor> {
    match kind {
        ReliabilityKind::Margin => compute_margins(posteriors, labels),
        ReliabilityKind::NoMargin => hit_evidence(scores, labels),
        ReliabilityKind::PosteriorMean => target_posterior_evidence(posteriors, labels),
    }
}

/// Head reliabilities: one row of `K` values (global) or `C` rows (local).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityMatrix {
    pub mode: WeightingMode,
    pub num_classes: usize,
    pub num_heads: usize,
    pub values: Vec<f64>,
}

impl ReliabilityMatrix {
    /// Reliabilities used for `class` (the shared row in global mode).
    pub fn row(&self, class: usize) -> &[f64] {
        match self.mode {
            WeightingMode::Global => &self.values,
            WeightingMode::Local => {
                &self.values[class * self.num_heads..(class + 1) * self.num_heads]
            }
        }
    }
}

/// Mean evidence per head over all training examples.
pub fn global_reliability(margins: &MarginTensor) -> Result<ReliabilityMatrix> {
    if margins.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let k = margins.num_heads;
    let mut sums = vec![0.0; k];
    for i in 0..margins.len() {
        for (s, &m) in sums.iter_mut().zip(margins.row(i)) {
            *s += m;
        }
    }
    let n = margins.len() as f64;
    Ok(ReliabilityMatrix {
        mode: WeightingMode::Global,
        num_classes: margins.num_classes,
        num_heads: k,
        values: sums.into_iter().map(|s| s / n).collect(),
    })
}

/// Mean evidence per head over the training examples of each class.
pub fn local_reliability(margins: &MarginTensor) -> Result<ReliabilityMatrix> {
    let (k, c) = (margins.num_heads, margins.num_classes);
    let mut sums = vec![0.0; c * k];
    let mut counts = vec![0usize; c];
    for (i, &y) in margins.labels.iter().enumerate() {
        counts[y] += 1;
        for (s, &m) in sums[y * k..(y + 1) * k].iter_mut().zip(margins.row(i)) {
            *s += m;
        }
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass {
            class,
            name: format!("#{class}"),
        });
    }
    for (row, &n) in sums.chunks_exact_mut(k).zip(&counts) {
        let n = n as f64;
        for s in row {
            *s /= n;
        }
    }
    Ok(ReliabilityMatrix {
        mode: WeightingMode::Local,
        num_classes: c,
        num_heads: k,
        values: sums,
    })
}

/// Class-conditional top-1 hit rate: the margin-free ablation reliability.
pub fn no_margin_reliability(scores: &ScoreTensor, labels: &[usize]) -> Result<ReliabilityMatrix> {
    local_reliability(&hit_evidence(scores, labels)?)
}

/// Sparse `[C][K]` head weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub mode: WeightingMode,
    pub num_classes: usize,
    pub num_heads: usize,
    pub weights: Vec<f64>,
    /// Per class, the surviving heads, most reliable first.
    pub selected: Vec<Vec<usize>>,
    pub tau_w: f64,
    pub k: usize,
    /// Classes whose selected heads all have zero reliability (weights fall back to uniform).
    pub undiscriminated_classes: Vec<usize>,
}

impl WeightMatrix {
    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.num_heads..(class + 1) * self.num_heads]
    }
}

/// Keeps the `k` most reliable heads (per class in local mode, once in global mode) and
/// softmaxes their reliabilities at temperature `tau_w`; the softmax denominator runs over
/// the surviving heads only.
pub fn sparsify_and_weight(rel: &ReliabilityMatrix, k: usize, tau_w: f64) -> Result<WeightMatrix> {
    if !(tau_w.is_finite() && tau_w > 0.0) {
        return Err(Error::NonPositiveTau {
            name: "tau_w",
            value: tau_w,
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let (nk, c) = (rel.num_heads, rel.num_classes);
    let k = k.min(nk);
    let mut weights = vec![0.0; c * nk];
    let mut selected = Vec::with_capacity(c);
    let mut undiscriminated = Vec::new();
    let mut scratch = vec![0.0; k];
    for class in 0..c {
        let r = rel.row(class);
        let top = top_k_indices(r, k);
        let kept: Vec<f64> = top.iter().map(|&j| r[j]).collect();
        softmax_into(&kept, tau_w, &mut scratch);
        let row = &mut weights[class * nk..(class + 1) * nk];
        for (&j, &w) in top.iter().zip(&scratch) {
            row[j] = w;
        }
        if kept.iter().all(|&v| v == 0.0) {
            undiscriminated.push(class);
        }
        selected.push(top);
    }
    Ok(WeightMatrix {
        mode: rel.mode,
        num_classes: c,
        num_heads: nk,
        weights,
        selected,
        tau_w,
        k,
        undiscriminated_classes: undiscriminated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPrediction {
    pub predictions: Vec<usize>,
    /// `[rows][C]` aggregate class scores; only global mode yields distributions.
    pub scores: Vec<f64>,
    pub num_classes: usize,
}

impl WeightedPrediction {
    pub fn scores_for(&self, r: usize) -> &[f64] {
        &self.scores[r * self.num_classes..(r + 1) * self.num_classes]
    }
}

pub fn weighted_predict(posteriors: &PosteriorTensor, wm: &WeightMatrix) -> Result<WeightedPrediction> {
    if posteriors.num_heads != wm.num_heads || posteriors.num_classes != wm.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "posteriors are K={} C={}, weights are K={} C={}",
            posteriors.num_heads, posteriors.num_classes, wm.num_heads, wm.num_classes
        )));
    }
    let (k, c) = (wm.num_heads, wm.num_classes);
    let mut scores = vec![0.0; posteriors.len() * c];
    let mut predictions = Vec::with_capacity(posteriors.len());
    for (r, out) in scores.chunks_exact_mut(c).enumerate() {
        for (class, acc) in out.iter_mut().enumerate() {
            let w = wm.row(class);
            for (j, &wj) in w.iter().enumerate().take(k) {
                if wj != 0.0 {
                    *acc += wj * posteriors.row(r, j)[class];
                }
            }
        }
        predictions.push(argmax(out));
    }
    Ok(WeightedPrediction {
        predictions,
        scores,
        num_classes: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::Metric;

    fn posterior_tensor(k: usize, c: usize, values: Vec<f64>) -> PosteriorTensor {
        PosteriorTensor {
            rows: (0..values.len() / (k * c)).collect(),
            num_heads: k,
            num_classes: c,
            values,
            tau_p: 1.0,
        }
    }

    fn reliability(mode: WeightingMode, c: usize, k: usize, values: Vec<f64>) -> ReliabilityMatrix {
        ReliabilityMatrix {
            mode,
            num_classes: c,
            num_heads: k,
            values,
        }
    }

    #[test]
    fn margin_examples() {
        let p = [0.7, 0.2, 0.1];
        assert!((clamped_margin(&p, 0) - 0.5).abs() < 1e-15);
        assert_eq!(clamped_margin(&p, 1), 0.0);
        assert_eq!(clamped_margin(&[0.5, 0.5], 0), 0.0);
        assert_eq!(clamped_margin(&[0.5, 0.5], 1), 0.0);
    }

    #[test]
    fn single_class_rejected() {
        let pt = posterior_tensor(1, 1, vec![1.0]);
        assert!(matches!(compute_margins(&pt, &[0]), Err(Error::SingleClass(1))));
    }

    #[test]
    fn global_mean_of_margins() {
        let m = MarginTensor {
            num_heads: 1,
            num_classes: 2,
            labels: vec![0, 1],
            values: vec![0.4, 0.2],
        };
        let r = global_reliability(&m).unwrap();
        assert!((r.values[0] - 0.3).abs() < 1e-15);
        let empty = MarginTensor {
            labels: vec![],
            values: vec![],
            ..m
        };
        assert!(matches!(global_reliability(&empty), Err(Error::EmptyTrainSet)));
    }

    #[test]
    fn local_reliability_examples() {
        // class 0: one example, margin 0.8; class 1: uniform posteriors -> 0
        let pt = posterior_tensor(1, 2, vec![0.9, 0.1, 0.5, 0.5]);
        let m = compute_margins(&pt, &[0, 1]).unwrap();
        let r = local_reliability(&m).unwrap();
        assert!((r.row(0)[0] - 0.8).abs() < 1e-15);
        assert_eq!(r.row(1)[0], 0.0);
        let only_zero = compute_margins(&posterior_tensor(1, 2, vec![0.9, 0.1]), &[0]).unwrap();
        assert!(matches!(
            local_reliability(&only_zero),
            Err(Error::EmptyClass { class: 1, .. })
        ));
    }

    #[test]
    fn weights_uniform_when_reliabilities_equal() {
        let r = reliability(WeightingMode::Local, 1, 4, vec![0.3, 0.3, 0.3, 0.1]);
        let w = sparsify_and_weight(&r, 3, 0.5).unwrap();
        assert_eq!(w.selected[0], vec![0, 1, 2]);
        for j in 0..3 {
            assert!((w.row(0)[j] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(w.row(0)[3], 0.0);
    }

    #[test]
    fn temperature_limits() {
        let r = reliability(WeightingMode::Global, 2, 2, vec![0.9, 0.1]);
        let hot = sparsify_and_weight(&r, 2, 1e6).unwrap();
        assert!((hot.row(0)[0] - 0.5).abs() < 1e-6 && (hot.row(0)[1] - 0.5).abs() < 1e-6);
        let cold = sparsify_and_weight(&r, 2, 1e-3).unwrap();
        assert!((cold.row(1)[0] - 1.0).abs() < 1e-6);
        assert!(matches!(sparsify_and_weight(&r, 2, 0.0), Err(Error::NonPositiveTau { .. })));
    }

    #[test]
    fn all_zero_class_is_flagged() {
        let r = reliability(WeightingMode::Local, 2, 3, vec![0.5, 0.2, 0.0, 0.0, 0.0, 0.0]);
        let w = sparsify_and_weight(&r, 2, 0.5).unwrap();
        assert_eq!(w.undiscriminated_classes, vec![1]);
        assert_eq!(w.selected[1], vec![0, 1]);
        assert_eq!(&w.row(1)[..2], &[0.5, 0.5]);
        assert_eq!(w.k, 2);
    }

    #[test]
    fn single_head_prediction_matches_head_argmax() {
        let pt = posterior_tensor(2, 3, vec![0.2, 0.5, 0.3, 0.6, 0.3, 0.1]);
        let r = reliability(WeightingMode::Local, 3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let w = sparsify_and_weight(&r, 1, 0.5).unwrap();
        let pred = weighted_predict(&pt, &w).unwrap();
        assert_eq!(pred.predictions, vec![1]);
        assert_eq!(pred.scores_for(0), &[0.2, 0.5, 0.3]);
    }

    #[test]
    fn global_scores_are_distributions() {
        let pt = posterior_tensor(2, 2, vec![0.2, 0.8, 0.6, 0.4]);
        let r = reliability(WeightingMode::Global, 2, 2, vec![0.7, 0.1]);
        let w = sparsify_and_weight(&r, 2, 0.5).unwrap();
        let pred = weighted_predict(&pt, &w).unwrap();
        assert!((pred.scores_for(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let pt = posterior_tensor(2, 2, vec![0.5; 4]);
        let r = reliability(WeightingMode::Global, 2, 3, vec![0.1; 3]);
        let w = sparsify_and_weight(&r, 1, 0.5).unwrap();
        assert!(matches!(weighted_predict(&pt, &w), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn no_margin_is_class_hit_rate() {
        let st = ScoreTensor {
            rows: vec![0, 1, 2],
            num_heads: 2,
            num_classes: 2,
            // head 0 always right; head 1 always says class 1
            scores: vec![0.9, 0.1, 0.1, 0.9, 0.2, 0.3, 0.1, 0.9, 0.8, 0.1, 0.1, 0.9],
            metric: Metric::Cosine,
            zero_norm_count: 0,
        };
        let r = no_margin_reliability(&st, &[0, 1, 0]).unwrap();
        assert_eq!(r.row(0), &[1.0, 0.0]);
        assert_eq!(r.row(1), &[1.0, 1.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn distribution(c: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01f64..1.0, c).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn margin_bounds_and_support(p in distribution(4), t in 0usize..4) {
                let m = clamped_margin(&p, t);
                prop_assert!((0.0..=1.0).contains(&m));
                let unique_top = p.iter().enumerate().all(|(c, &v)| c == t || v < p[t]);
                prop_assert_eq!(m > 0.0, unique_top);
            }

            #[test]
            fn raising_target_never_lowers_margin(
                p in distribution(4), t in 0usize..4, bump in 0.0f64..1.0,
            ) {
                // move a fraction of the competitors' mass to the target, proportionally
                let q: Vec<f64> = p.iter().enumerate().map(|(c, &v)| {
                    if c == t { v + bump * (1.0 - p[t]) } else { v * (1.0 - bump) }
                }).collect();
                prop_assert!(clamped_margin(&q, t) >= clamped_margin(&p, t) - 1e-15);
            }

            #[test]
            fn weight_rows_normalized(
                r in prop::collection::vec(0.0f64..1.0, 3 * 8),
                k in 1usize..12,
                tau in 0.001f64..10.0,
            ) {
                let rel = reliability(WeightingMode::Local, 3, 8, r);
                let w = sparsify_and_weight(&rel, k, tau).unwrap();
                for c in 0..3 {
                    let row = w.row(c);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert_eq!(w.selected[c].len(), k.min(8));
                    for (j, &v) in row.iter().enumerate() {
                        if !w.selected[c].contains(&j) {
                            prop_assert_eq!(v, 0.0);
                        }
                    }
                }
            }

            #[test]
            fn global_equals_local_on_identical_rows(
                r in prop::collection::vec(0.0f64..1.0, 6),
                k in 1usize..7,
            ) {
                let global = reliability(WeightingMode::Global, 3, 6, r.clone());
                let local = reliability(WeightingMode::Local, 3, 6, r.repeat(3));
                let wg = sparsify_and_weight(&global, k, 0.5).unwrap();
                let wl = sparsify_and_weight(&local, k, 0.5).unwrap();
                prop_assert_eq!(&wg.weights, &wl.weights);
                prop_assert_eq!(&wg.selected, &wl.selected);
            }
        }
    }
}
