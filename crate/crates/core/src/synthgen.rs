//! Seeded synthetic feature sets with planted class-expert heads.
//!
//! # Generator
//!
//! All randomness comes from a single SplitMix64 stream (Steele, Lea & Flood 2014):
//!
//! ```text
//! next():  state += 0x9E3779B97F4A7C15
//!          z = state
//!          z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!          z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!          return z ^ (z >> 31)
//! ```
//!
//! The initial state is derived from the spec: `s = seed`, then for each of
//! `(num_classes, num_heads, head_dim, examples_per_class)` in that order,
//! `s = SplitMix64 { state: s ^ v }.next()`.
//!
//! Standard normals use one Box-Muller draw per pair of outputs `(a, b)`:
//! `u1 = ((a >> 11) + 1) / 2^53`, `u2 = (b >> 11) / 2^53`,
//! `z = sqrt(-2 ln u1) * cos(2 pi u2)`.
//!
//! Draw order:
//! 1. For each head: `d` normals for the shared head offset direction, then `C` blocks of
//!    `d` normals for the class directions. When `d > C` the `C + 1` vectors (offset first)
//!    are orthonormalized by modified Gram-Schmidt, otherwise each is normalized alone.
//! 2. Examples in class-major order (`example = class * examples_per_class + t`), each
//!    drawing `K * d` noise normals in head-major order.
//!
//! Feature at head `h` for an example of class `c`:
//! `head_offset * b_h + gap(h, c) * u_{h,c} + noise_std * z`, where `gap` is `expert_gap`
//! at `h = expert_map[c]`, `expert_gap / 3` on generalist heads, and 0 elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureSet, Manifest, DTYPE, SCHEMA_VERSION};

pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_normal(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * SCALE;
        let u2 = (self.next_u64() >> 11) as f64 * SCALE;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub examples_per_class: usize,
    /// Planted expert head for each class.
    pub expert_map: Vec<usize>,
    pub expert_gap: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub generalist_heads: Vec<usize>,
    /// Norm of the class-independent mean shared by all examples at a head.
    #[serde(default)]
    pub head_offset: f64,
    #[serde(default)]
    pub num_layers: usize,
    #[serde(default)]
    pub heads_per_layer: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Class `c`'s expert is head `(c * stride) % K`, with a stride spreading experts over
    /// the available heads.
    pub fn planted(
        num_classes: usize,
        num_heads: usize,
        head_dim: usize,
        examples_per_class: usize,
        expert_gap: f64,
        noise_std: f64,
        seed: u64,
    ) -> Self {
        let stride = (num_heads / num_classes.max(1)).max(1);
        Self {
            num_classes,
            num_heads,
            head_dim,
            examples_per_class,
            expert_map: (0..num_classes).map(|c| (c * stride) % num_heads.max(1)).collect(),
            expert_gap,
            noise_std,
            generalist_heads: Vec::new(),
            head_offset: 0.0,
            num_layers: 0,
            heads_per_layer: 0,
            seed,
        }
    }

    /// Desk-scale benchmark: 10 classes, 64 heads in 8 layers of 8, d = 32, 30 examples
    /// per class, unit expert gap, noise at a quarter of the gap, a shared head offset of
    /// twice the gap and generalist heads 60..64.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            generalist_heads: (60..64).collect(),
            head_offset: 2.0,
            num_layers: 8,
            heads_per_layer: 8,
            ..Self::planted(10, 64, 32, 30, 1.0, 0.25, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_heads == 0 || self.head_dim == 0 || self.examples_per_class == 0 {
            return bad("num_heads, head_dim and examples_per_class must be positive".into());
        }
        if self.expert_map.len() != self.num_classes {
            return bad(format!(
                "expert_map has {} entries for {} classes",
                self.expert_map.len(),
                self.num_classes
            ));
        }
        if let Some(h) = self
            .expert_map
            .iter()
            .chain(&self.generalist_heads)
            .find(|&&h| h >= self.num_heads)
        {
            return bad(format!("head {h} out of range for {} heads", self.num_heads));
        }
        if !(self.expert_gap.is_finite() && self.expert_gap >= 0.0) {
            return bad(format!("expert_gap must be finite and >= 0, got {}", self.expert_gap));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(self.head_offset.is_finite() && self.head_offset >= 0.0) {
            return bad(format!("head_offset must be finite and >= 0, got {}", self.head_offset));
        }
        if (self.num_layers == 0) != (self.heads_per_layer == 0)
            || self.num_layers * self.heads_per_layer != self.num_heads && self.num_layers > 0
        {
            return bad("num_layers x heads_per_layer must equal num_heads (or both be 0)".into());
        }
        Ok(())
    }

    fn stream(&self) -> SplitMix64 {
        let mut s = self.seed;
        for v in [self.num_classes, self.num_heads, self.head_dim, self.examples_per_class] {
            s = SplitMix64::new(s ^ v as u64).next_u64();
        }
        SplitMix64::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub expert_map: Vec<usize>,
    pub generalist_heads: Vec<usize>,
    pub spec: SynthSpec,
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Modified Gram-Schmidt, in place, in vector order.
fn orthonormalize(vectors: &mut [Vec<f64>]) {
    for i in 0..vectors.len() {
        let (done, rest) = vectors.split_at_mut(i);
        let v = &mut rest[0];
        for u in done.iter() {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        }
        normalize(v);
    }
}

pub fn generate(spec: &SynthSpec) -> Result<(FeatureSet, GroundTruth)> {
    spec.validate()?;
    let (c, k, d, per) = (spec.num_classes, spec.num_heads, spec.head_dim, spec.examples_per_class);
    let mut rng = spec.stream();

    // per head: [offset, class_0, .., class_{C-1}]
    let mut directions: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut vs: Vec<Vec<f64>> = (0..=c)
            .map(|_| (0..d).map(|_| rng.next_normal()).collect())
            .collect();
        if d > c {
            orthonormalize(&mut vs);
        } else {
            vs.iter_mut().for_each(|v| normalize(v));
        }
        directions.push(vs);
    }

    let mut gaps = vec![0.0; k * c];
    for class in 0..c {
        for &h in &spec.generalist_heads {
            gaps[h * c + class] = spec.expert_gap / 3.0;
        }
        gaps[spec.expert_map[class] * c + class] = spec.expert_gap;
    }

    let n = c * per;
    let mut values = Vec::with_capacity(n * k * d);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for class in 0..c {
        for t in 0..per {
            labels.push(class);
            ids.push(format!("syn-c{class:03}-{t:04}"));
            for (h, dirs) in directions.iter().enumerate() {
                let gap = gaps[h * c + class];
                for (&base, &dir) in dirs[0].iter().zip(&dirs[class + 1]).take(d) {
                    let v = spec.head_offset * base + gap * dir + spec.noise_std * rng.next_normal();
                    values.push(v as f32);
                }
            }
        }
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        model_id: format!("synthetic-planted-experts-seed{}", spec.seed),
        num_examples: n,
        num_heads: k,
        head_dim: d,
        num_layers: spec.num_layers,
        heads_per_layer: spec.heads_per_layer,
        class_names: (0..c).map(|i| format!("class_{i:03}")).collect(),
        labels: Some(labels),
        example_ids: ids,
        dtype: DTYPE.into(),
    };
    let fs = FeatureSet::new(manifest, values)?;
    Ok((
        fs,
        GroundTruth {
            expert_map: spec.expert_map.clone(),
            generalist_heads: spec.generalist_heads.clone(),
            spec: spec.clone(),
        },
    ))
}
