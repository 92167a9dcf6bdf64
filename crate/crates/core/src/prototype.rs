//! Per-head class centroids, centroid similarity scores and per-head class posteriors.
//!
//! These are the stages shared by uniform voting and reliability-weighted voting.
//! All arithmetic is `f64`; features are widened from their `f32` storage on use.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureSet, TrainSet};

/// Similarity between a head feature and a class centroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    /// Unnormalized inner product (the L2-norm ablation).
    Dot,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "dot" => Ok(Metric::Dot),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Dot => "dot",
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `[K][C][d]` class means per head.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    pub num_heads: usize,
    pub num_classes: usize,
    pub head_dim: usize,
    pub centroids: Vec<f64>,
    /// `[K][C]` L2 norms of the centroids.
    pub norms: Vec<f64>,
    pub class_counts: Vec<usize>,
}

impl CentroidBank {
    pub fn centroid(&self, head: usize, class: usize) -> &[f64] {
        let start = (head * self.num_classes + class) * self.head_dim;
        &self.centroids[start..start + self.head_dim]
    }

    pub fn norm(&self, head: usize, class: usize) -> f64 {
        self.norms[head * self.num_classes + class]
    }

    /// Builds a bank from raw `[K][C][d]` centroids, recomputing the norms.
    pub fn from_centroids(
        num_heads: usize,
        num_classes: usize,
        head_dim: usize,
        centroids: Vec<f64>,
        class_counts: Vec<usize>,
    ) -> Result<Self> {
        if centroids.len() != num_heads * num_classes * head_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} centroid values for K={num_heads} C={num_classes} d={head_dim}",
                centroids.len()
            )));
        }
        if class_counts.len() != num_classes {
            return Err(Error::ShapeMismatch(format!(
                "{} class counts for C={num_classes}",
                class_counts.len()
            )));
        }
        let norms = centroids
            .chunks_exact(head_dim)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            num_heads,
            num_classes,
            head_dim,
            centroids,
            norms,
            class_counts,
        })
    }
}

/// Per-head class means over the training set, summed in ascending example order.
pub fn compute_centroids(fs: &FeatureSet, train: &TrainSet) -> Result<CentroidBank> {
    compute_centroids_with_classes(fs, train, fs.num_classes())
}

/// As [`compute_centroids`], with training labels drawn from `0..num_classes` instead of
/// the manifest's class list.
pub fn compute_centroids_with_classes(
    fs: &FeatureSet,
    train: &TrainSet,
    num_classes: usize,
) -> Result<CentroidBank> {
    let (k, c, d) = (fs.num_heads(), num_classes, fs.head_dim());
    if train.labels.len() != train.indices.len() {
        return Err(Error::LengthMismatch(format!(
            "{} training indices but {} labels",
            train.indices.len(),
            train.labels.len()
        )));
    }
    if let Some(&i) = train.indices.iter().find(|&&i| i >= fs.num_examples()) {
        return Err(Error::DimMismatch(format!(
            "training index {i} out of range for {} examples",
            fs.num_examples()
        )));
    }
    if let Some(pos) = train.labels.iter().position(|&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            example: train.indices[pos],
            label: train.labels[pos],
            num_classes: c,
        });
    }
    let counts = train.class_counts(c);
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        let name = if c == fs.num_classes() {
            fs.manifest().class_names[class].clone()
        } else {
            format!("#{class}")
        };
        return Err(Error::EmptyClass { class, name });
    }

    let mut sums = vec![0.0f64; k * c * d];
    sums.par_chunks_mut(c * d).enumerate().for_each(|(head, block)| {
        for (&i, &label) in train.indices.iter().zip(&train.labels) {
            let dst = &mut block[label * d..(label + 1) * d];
            for (acc, &v) in dst.iter_mut().zip(fs.head(i, head)) {
                *acc += f64::from(v);
            }
        }
    });
    for (chunk, n) in sums
        .chunks_exact_mut(d)
        .zip((0..k).flat_map(|_| counts.iter()))
    {
        let n = *n as f64;
        for v in chunk {
            *v /= n;
        }
    }
    CentroidBank::from_centroids(k, c, d, sums, counts)
}

/// `[rows][K][C]` similarity scores for the examples listed in `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub rows: Vec<usize>,
    pub num_heads: usize,
    pub num_classes: usize,
    pub scores: Vec<f64>,
    pub metric: Metric,
    /// Cosine evaluations where either vector had zero norm (score defined as 0).
    pub zero_norm_count: usize,
}

impl ScoreTensor {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Scores over classes for row `r` at `head`.
    pub fn row(&self, r: usize, head: usize) -> &[f64] {
        let start = (r * self.num_heads + head) * self.num_classes;
        &self.scores[start..start + self.num_classes]
    }
}

pub fn similarity_scores(
    fs: &FeatureSet,
    rows: &[usize],
    bank: &CentroidBank,
    metric: Metric,
) -> Result<ScoreTensor> {
    if fs.num_heads() != bank.num_heads || fs.head_dim() != bank.head_dim {
        return Err(Error::DimMismatch(format!(
            "features have K={} d={}, centroids have K={} d={}",
            fs.num_heads(),
            fs.head_dim(),
            bank.num_heads,
            bank.head_dim
        )));
    }
    if let Some(&i) = rows.iter().find(|&&i| i >= fs.num_examples()) {
        return Err(Error::DimMismatch(format!(
            "row {i} out of range for {} examples",
            fs.num_examples()
        )));
    }
    let (k, c) = (bank.num_heads, bank.num_classes);
    let mut scores = vec![0.0f64; rows.len() * k * c];
    let zero_norm_count = scores
        .par_chunks_mut(k * c)
        .zip(rows.par_iter())
        .map(|(out, &example)| {
            let mut zero = 0usize;
            for head in 0..k {
                let h = fs.head(example, head);
                let h_norm = h.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                for class in 0..c {
                    let mu = bank.centroid(head, class);
                    let dot: f64 = h.iter().zip(mu).map(|(&a, &b)| f64::from(a) * b).sum();
                    out[head * c + class] = match metric {
                        Metric::Dot => dot,
                        Metric::Cosine => {
                            let denom = h_norm * bank.norm(head, class);
                            if denom == 0.0 {
                                zero += 1;
                                0.0
                            } else {
                                dot / denom
                            }
                        }
                    };
                }
            }
            zero
        })
        .sum();
    Ok(ScoreTensor {
        rows: rows.to_vec(),
        num_heads: k,
        num_classes: c,
        scores,
        metric,
        zero_norm_count,
    })
}

/// `[rows][K][C]` per-head class posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTensor {
    pub rows: Vec<usize>,
    pub num_heads: usize,
    pub num_classes: usize,
    pub values: Vec<f64>,
    pub tau_p: f64,
}

impl PosteriorTensor {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, r: usize, head: usize) -> &[f64] {
        let start = (r * self.num_heads + head) * self.num_classes;
        &self.values[start..start + self.num_classes]
    }
}

/// Numerically stable softmax of `logits / tau` written into `out`.
pub(crate) fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(logits) {
        *o = ((s - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn head_posteriors(scores: &ScoreTensor, tau_p: f64) -> Result<PosteriorTensor> {
    if !(tau_p.is_finite() && tau_p > 0.0) {
        return Err(Error::NonPositiveTau {
            name: "tau_p",
            value: tau_p,
        });
    }
    let c = scores.num_classes;
    let mut values = vec![0.0f64; scores.scores.len()];
    values
        .par_chunks_mut(c)
        .zip(scores.scores.par_chunks(c))
        .for_each(|(out, logits)| softmax_into(logits, tau_p, out));
    Ok(PosteriorTensor {
        rows: scores.rows.clone(),
        num_heads: scores.num_heads,
        num_classes: c,
        values,
        tau_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::feature_set;

    fn scores_for(h: [f32; 2], mu: [f64; 2]) -> ScoreTensor {
        let fs = feature_set(2, 1, 2, vec![0, 1], vec![h[0], h[1], 0.0, 1.0]);
        let bank = CentroidBank::from_centroids(1, 2, 2, vec![mu[0], mu[1], 0.0, 1.0], vec![1, 1]).unwrap();
        similarity_scores(&fs, &[0], &bank, Metric::Cosine).unwrap()
    }

    #[test]
    fn centroid_of_two_vectors() {
        let fs = feature_set(3, 1, 2, vec![0, 0, 1], vec![1.0, 0.0, 0.0, 1.0, 4.0, 4.0]);
        let train = TrainSet::new(vec![(0, 0), (1, 0), (2, 1)]);
        let bank = compute_centroids(&fs, &train).unwrap();
        assert_eq!(bank.centroid(0, 0), &[0.5, 0.5]);
        // single shot: exactly the example
        assert_eq!(bank.centroid(0, 1), &[4.0, 4.0]);
        assert_eq!(bank.class_counts, vec![2, 1]);
    }

    #[test]
    fn empty_class_aborts() {
        let fs = feature_set(2, 1, 1, vec![0, 1], vec![1.0, 2.0]);
        let train = TrainSet::new(vec![(0, 0)]);
        assert!(matches!(
            compute_centroids(&fs, &train),
            Err(Error::EmptyClass { class: 1, .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(scores_for([1.0, 0.0], [1.0, 0.0]).row(0, 0)[0], 1.0);
        assert_eq!(scores_for([1.0, 0.0], [0.0, 1.0]).row(0, 0)[0], 0.0);
        let s = scores_for([3.0, 4.0], [4.0, 3.0]).row(0, 0)[0];
        assert!((s - 24.0 / 25.0).abs() < 1e-15, "{s}");
    }

    #[test]
    fn zero_norm_scores_zero_and_counts() {
        let st = scores_for([0.0, 0.0], [1.0, 0.0]);
        assert_eq!(st.row(0, 0), &[0.0, 0.0]);
        assert_eq!(st.zero_norm_count, 2);
    }

    #[test]
    fn dim_mismatch() {
        let fs = feature_set(2, 1, 2, vec![0, 1], vec![0.0; 4]);
        let bank = CentroidBank::from_centroids(1, 2, 3, vec![0.0; 6], vec![1, 1]).unwrap();
        assert!(matches!(
            similarity_scores(&fs, &[0], &bank, Metric::Cosine),
            Err(Error::DimMismatch(_))
        ));
    }

    fn posteriors_of(scores: Vec<f64>, tau: f64) -> Vec<f64> {
        let c = scores.len();
        let st = ScoreTensor {
            rows: vec![0],
            num_heads: 1,
            num_classes: c,
            scores,
            metric: Metric::Cosine,
            zero_norm_count: 0,
        };
        head_posteriors(&st, tau).unwrap().values
    }

    #[test]
    fn posterior_examples() {
        assert_eq!(posteriors_of(vec![0.3; 4], 0.03), vec![0.25; 4]);
        let e = std::f64::consts::E;
        let p = posteriors_of(vec![1.0, 0.0], 1.0);
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.731059).abs() < 1e-6 && (p[1] - 0.268941).abs() < 1e-6);
        let p = posteriors_of(vec![1.0, 0.9], 0.001);
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1] < 1e-6);
    }

    #[test]
    fn non_positive_tau() {
        let st = ScoreTensor {
            rows: vec![],
            num_heads: 1,
            num_classes: 2,
            scores: vec![],
            metric: Metric::Cosine,
            zero_norm_count: 0,
        };
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(matches!(head_posteriors(&st, tau), Err(Error::NonPositiveTau { .. })));
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.1, 0.1]), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn posterior_rows_normalized_and_monotone(
                scores in prop::collection::vec(-1.0f64..1.0, 2..6),
                bump in 0.001f64..0.5,
                pick in 0usize..6,
                tau in 0.001f64..2.0,
            ) {
                let p = posteriors_of(scores.clone(), tau);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|&v| v >= 0.0));
                let c = pick % scores.len();
                let mut raised = scores.clone();
                raised[c] += bump;
                let q = posteriors_of(raised, tau);
                // strictly larger unless already saturated at 1
                prop_assert!(q[c] > p[c] || p[c] == 1.0);
            }

            #[test]
            fn lower_tau_sharpens_argmax(
                scores in prop::collection::vec(-1.0f64..1.0, 2..6),
                tau in 0.05f64..2.0,
            ) {
                let top = argmax(&scores);
                let unique = scores.iter().enumerate().all(|(i, &s)| i == top || s < scores[top] - 1e-3);
                prop_assume!(unique);
                let p = posteriors_of(scores.clone(), tau);
                let q = posteriors_of(scores, tau / 2.0);
                prop_assert!(q[top] > p[top] || p[top] == 1.0);
            }
        }
    }
}
