use crate::feature_store::{FeatureSet, Manifest, DTYPE, SCHEMA_VERSION};

/// Labelled feature set with `max(label) + 1` (at least 2) classes.
pub(crate) fn feature_set(
    n: usize,
    k: usize,
    d: usize,
    labels: Vec<usize>,
    values: Vec<f32>,
) -> FeatureSet {
    let c = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        model_id: "unit".into(),
        num_examples: n,
        num_heads: k,
        head_dim: d,
        num_layers: 0,
        heads_per_layer: 0,
        class_names: (0..c).map(|i| format!("c{i}")).collect(),
        labels: Some(labels),
        example_ids: (0..n).map(|i| format!("x{i}")).collect(),
        dtype: DTYPE.into(),
    };
    FeatureSet::new(manifest, values).unwrap()
}
