//! Weight concentration and per-class expert-head summaries of a fitted weight matrix.

use serde::{Deserialize, Serialize};

use crate::calm::WeightMatrix;
use crate::feature_store::Manifest;
use crate::sav::top_k_indices;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPoint {
    /// 1-based rank by weight.
    pub rank: usize,
    pub head: usize,
    pub weight: f64,
    /// Mass of ranks `1..=rank`.
    pub cumulative: f64,
    /// Mass of ranks `rank..`, so the first point is always the row total.
    pub survival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub class: usize,
    pub points: Vec<SurvivalPoint>,
    /// Per-head weight of a uniform spread over the `k` selected heads.
    pub uniform_reference: f64,
}

/// Heads of each weight row sorted by weight (ties to the lower index) with cumulative and
/// tail mass. Covers every head, including the zero-weight tail.
pub fn weight_survival_export(wm: &WeightMatrix) -> Vec<SurvivalCurve> {
    (0..wm.num_classes)
        .map(|class| {
            let row = wm.row(class);
            let order = top_k_indices(row, row.len());
            let total: f64 = order.iter().map(|&j| row[j]).sum();
            let mut cumulative = 0.0;
            let points = order
                .iter()
                .enumerate()
                .map(|(r, &head)| {
                    let survival = (total - cumulative).max(0.0);
                    cumulative += row[head];
                    SurvivalPoint {
                        rank: r + 1,
                        head,
                        weight: row[head],
                        cumulative,
                        survival,
                    }
                })
                .collect();
            SurvivalCurve {
                class,
                points,
                uniform_reference: 1.0 / wm.k as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertHead {
    pub class: usize,
    pub head: usize,
    pub weight: f64,
    pub layer: Option<usize>,
    pub head_in_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertHeadExport {
    pub per_class: Vec<ExpertHead>,
    /// How many classes pick each flat head as their expert.
    pub counts: Vec<usize>,
    /// `counts` reshaped to `[layers][heads_per_layer]` when the manifest has the layout.
    pub layer_grid: Option<Vec<Vec<usize>>>,
}

/// Highest-weight head per class. `class_ids` maps weight-matrix rows to manifest
/// class indices.
pub fn expert_head_export(wm: &WeightMatrix, manifest: &Manifest, class_ids: &[usize]) -> ExpertHeadExport {
    let mut counts = vec![0; wm.num_heads];
    let per_class = (0..wm.num_classes)
        .map(|row| {
            let head = top_k_indices(wm.row(row), 1)[0];
            counts[head] += 1;
            let coords = manifest.head_coordinates(head);
            ExpertHead {
                class: class_ids[row],
                head,
                weight: wm.row(row)[head],
                layer: coords.map(|c| c.0),
                head_in_layer: coords.map(|c| c.1),
            }
        })
        .collect();
    let (l, h) = (manifest.num_layers, manifest.heads_per_layer);
    let layer_grid = (l > 0 && l * h == wm.num_heads)
        .then(|| counts.chunks(h).map(<[usize]>::to_vec).collect());
    ExpertHeadExport {
        per_class,
        counts,
        layer_grid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calm::WeightingMode;

    fn matrix(weights: Vec<f64>, c: usize, k: usize, sel: usize) -> WeightMatrix {
        WeightMatrix {
            mode: WeightingMode::Local,
            num_classes: c,
            num_heads: k,
            weights,
            selected: vec![vec![]; c],
            tau_w: 0.5,
            k: sel,
            undiscriminated_classes: vec![],
        }
    }

    #[test]
    fn one_hot_survival() {
        let wm = matrix(vec![0.0, 1.0, 0.0, 0.0], 1, 4, 1);
        let curve = &weight_survival_export(&wm)[0];
        let surv: Vec<f64> = curve.points.iter().map(|p| p.survival).collect();
        assert_eq!(surv, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(curve.points[0].head, 1);
        assert_eq!(curve.uniform_reference, 1.0);
    }

    #[test]
    fn uniform_survival_is_linear() {
        let wm = matrix(vec![0.25; 4], 1, 4, 4);
        let curve = &weight_survival_export(&wm)[0];
        for p in &curve.points {
            assert!((p.survival - (1.0 - 0.25 * (p.rank - 1) as f64)).abs() < 1e-12);
        }
        let heads: Vec<usize> = curve.points.iter().map(|p| p.head).collect();
        assert_eq!(heads, vec![0, 1, 2, 3]);
    }

    #[test]
    fn expert_grid() {
        let manifest: Manifest = serde_json::from_value(serde_json::json!({
            "schema_version": 1,
            "model_id": "m",
            "dtype": "f32le",
            "num_examples": 1,
            "num_heads": 4,
            "head_dim": 1,
            "num_layers": 2,
            "heads_per_layer": 2,
            "class_names": ["a", "b", "c"],
            "example_ids": ["x"],
        }))
        .unwrap();
        let wm = matrix(
            vec![0.0, 0.0, 0.9, 0.1, 0.0, 0.0, 0.6, 0.4, 0.7, 0.3, 0.0, 0.0],
            3,
            4,
            2,
        );
        let ex = expert_head_export(&wm, &manifest, &[0, 1, 2]);
        assert_eq!(ex.counts, vec![1, 0, 2, 0]);
        assert_eq!(ex.layer_grid, Some(vec![vec![1, 0], vec![2, 0]]));
        assert_eq!((ex.per_class[0].layer, ex.per_class[0].head_in_layer), (Some(1), Some(0)));
    }
}
