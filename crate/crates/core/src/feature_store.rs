//! Per-head feature tensors: the on-disk container, its JSON manifest, and
//! class-balanced shot sampling.
//!
//! Tensor file layout (all little-endian):
//!
//! ```text
//! magic   8 bytes  "CALMFS01"
//! N       u64      examples
//! K       u64      heads
//! d       u64      head dimension
//! data    N*K*d    f32, row-major [example][head][dim]
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CALMFS01";
pub const HEADER_LEN: usize = 8 + 3 * 8;
pub const SCHEMA_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub model_id: String,
    pub num_examples: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// 0 when unknown.
    pub num_layers: usize,
    /// 0 when unknown.
    pub heads_per_layer: usize,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    pub example_ids: Vec<String>,
    pub dtype: String,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(layer, head_in_layer)` for a flat head index, when layer metadata is present.
    pub fn head_coordinates(&self, head: usize) -> Option<(usize, usize)> {
        if self.num_layers > 0 && self.heads_per_layer > 0 {
            Some((head / self.heads_per_layer, head % self.heads_per_layer))
        } else {
            None
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidManifest(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dtype != DTYPE {
            return Err(Error::InvalidManifest(format!(
                "dtype must be {DTYPE:?}, got {:?}",
                self.dtype
            )));
        }
        if self.num_examples == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::InvalidManifest(
                "num_examples, num_heads and head_dim must be positive".into(),
            ));
        }
        if self.class_names.len() < 2 {
            return Err(Error::InvalidManifest(format!(
                "need at least 2 classes, got {}",
                self.class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate class name {name:?}")));
            }
        }
        if (self.num_layers == 0) != (self.heads_per_layer == 0) {
            return Err(Error::InvalidManifest(
                "num_layers and heads_per_layer must both be set or both be 0".into(),
            ));
        }
        if self.num_layers > 0 && self.num_layers * self.heads_per_layer != self.num_heads {
            return Err(Error::InvalidManifest(format!(
                "num_layers {} x heads_per_layer {} != num_heads {}",
                self.num_layers, self.heads_per_layer, self.num_heads
            )));
        }
        if self.example_ids.len() != self.num_examples {
            return Err(Error::InvalidManifest(format!(
                "{} example_ids for {} examples",
                self.example_ids.len(),
                self.num_examples
            )));
        }
        let mut seen = HashSet::new();
        for id in &self.example_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate example id {id:?}")));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.num_examples {
                return Err(Error::InvalidManifest(format!(
                    "{} labels for {} examples",
                    labels.len(),
                    self.num_examples
                )));
            }
            let c = self.num_classes();
            if let Some((example, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
                return Err(Error::LabelOutOfRange {
                    example,
                    label,
                    num_classes: c,
                });
            }
        }
        Ok(())
    }
}

/// An immutable, validated `[N][K][d]` feature tensor plus its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    manifest: Manifest,
    features: Vec<f32>,
}

impl FeatureSet {
    pub fn new(manifest: Manifest, features: Vec<f32>) -> Result<Self> {
        manifest.validate()?;
        let expected = manifest.num_examples * manifest.num_heads * manifest.head_dim;
        if features.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} values for N={} K={} d={}, got {}",
                manifest.num_examples,
                manifest.num_heads,
                manifest.head_dim,
                features.len()
            )));
        }
        check_finite(&features, manifest.num_heads, manifest.head_dim)?;
        Ok(Self { manifest, features })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn num_examples(&self) -> usize {
        self.manifest.num_examples
    }

    pub fn num_heads(&self) -> usize {
        self.manifest.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.manifest.head_dim
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.manifest.labels.as_deref()
    }

    pub fn example_id(&self, example: usize) -> &str {
        &self.manifest.example_ids[example]
    }

    /// Feature vector `h_head(x_example)`.
    pub fn head(&self, example: usize, head: usize) -> &[f32] {
        let d = self.head_dim();
        let start = (example * self.num_heads() + head) * d;
        &self.features[start..start + d]
    }

    pub fn example_index(&self, id: &str) -> Option<usize> {
        self.manifest.example_ids.iter().position(|e| e == id)
    }
}

fn check_finite(values: &[f32], num_heads: usize, head_dim: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(index) => Err(Error::NonFiniteValue {
            index,
            example: index / (num_heads * head_dim),
            head: (index / head_dim) % num_heads,
            dim: index % head_dim,
            value: values[index],
        }),
    }
}

/// Encodes a `CALMFS01` container.
pub fn encode_tensor(dims: [usize; 3], values: &[f32]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), values.len());
    let mut out = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    out.extend_from_slice(MAGIC);
    for dim in dims {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `CALMFS01` container into its dims and values. Finiteness is not checked here.
pub fn decode_tensor(bytes: &[u8]) -> Result<([usize; 3], Vec<f32>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let found = &bytes[..bytes.len().min(MAGIC.len())];
        return Err(Error::MagicMismatch {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::ShapeMismatch(format!(
            "tensor header truncated: {} bytes",
            bytes.len()
        )));
    }
    let mut dims = [0usize; 3];
    for (i, dim) in dims.iter_mut().enumerate() {
        let off = MAGIC.len() + i * 8;
        let raw = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8-byte slice"));
        *dim = usize::try_from(raw)
            .map_err(|_| Error::ShapeMismatch(format!("dimension {raw} does not fit in memory")))?;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::ShapeMismatch(format!("dims {dims:?} overflow")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count {
        return Err(Error::ShapeMismatch(format!(
            "tensor body is {} bytes, expected {count} for dims {dims:?}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok((dims, values))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_feature_set(manifest_path: &Path, tensor_path: &Path) -> Result<FeatureSet> {
    let manifest = read_manifest(manifest_path)?;
    let bytes = fs::read(tensor_path).map_err(|e| Error::io(tensor_path, e))?;
    let (dims, values) = decode_tensor(&bytes)?;
    let expected = [manifest.num_examples, manifest.num_heads, manifest.head_dim];
    if dims != expected {
        return Err(Error::ShapeMismatch(format!(
            "tensor header dims {dims:?} disagree with manifest (N, K, d) = {expected:?}"
        )));
    }
    FeatureSet::new(manifest, values)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_feature_set(fs_: &FeatureSet, manifest_path: &Path, tensor_path: &Path) -> Result<()> {
    let m = fs_.manifest();
    let bytes = encode_tensor([m.num_examples, m.num_heads, m.head_dim], fs_.features());
    fs::write(tensor_path, bytes).map_err(|e| Error::io(tensor_path, e))?;
    write_json(manifest_path, m)
}

/// Training examples bound to the labels used for fitting (ground truth or pseudo-labels).
/// Indices are strictly ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSet {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl TrainSet {
    pub fn new(mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup_by_key(|p| p.0);
        let (indices, labels) = pairs.into_iter().unzip();
        Self { indices, labels }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSplit {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub shots_per_class: usize,
}

impl ShotSplit {
    /// Binds the training indices to the feature set's ground-truth labels.
    pub fn train_set(&self, fs_: &FeatureSet) -> Result<TrainSet> {
        let labels = fs_.labels().ok_or(Error::MissingLabels)?;
        Ok(TrainSet::new(
            self.train_indices.iter().map(|&i| (i, labels[i])).collect(),
        ))
    }
}

/// Class-balanced shot sampling: per class, `min(shots, count)` training examples drawn
/// uniformly without replacement from a ChaCha8 stream seeded with `seed`.
pub fn sample_shots(fs_: &FeatureSet, shots: usize, seed: u64) -> Result<ShotSplit> {
    if shots == 0 {
        return Err(Error::InvalidConfig("shots per class must be positive".into()));
    }
    let labels = fs_.labels().ok_or(Error::MissingLabels)?;
    let mut by_class = vec![Vec::new(); fs_.num_classes()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyClass {
                class,
                name: fs_.manifest().class_names[class].clone(),
            });
        }
        if shots >= members.len() {
            warn!(
                "class {class} has {} examples <= {shots} shots; all go to training, none to test",
                members.len()
            );
        }
        let take = shots.min(members.len());
        let (chosen, _) = members.partial_shuffle(&mut rng, take);
        train.extend_from_slice(chosen);
    }
    train.sort_unstable();
    let mut in_train = vec![false; fs_.num_examples()];
    for &i in &train {
        in_train[i] = true;
    }
    let test = (0..fs_.num_examples()).filter(|&i| !in_train[i]).collect();
    Ok(ShotSplit {
        train_indices: train,
        test_indices: test,
        shots_per_class: shots,
    })
}
