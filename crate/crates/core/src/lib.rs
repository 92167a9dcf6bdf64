//! Few-shot classification from per-attention-head feature vectors of a frozen model.
//!
//! Each head gets class centroids from a handful of labelled shots. Heads then vote:
//! uniformly over the most accurate heads ([`sav`]), or with weights derived from how
//! confidently each head separates each class ([`calm`]).

pub mod calm;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalsuite;
pub mod feature_store;
pub mod prototype;
pub mod pseudo_label;
pub mod sav;
pub mod synthgen;

#[cfg(test)]
mod testutil;

pub use config::{RunConfig, TopK, Variant};
pub use error::{Error, Result};
pub use feature_store::{FeatureSet, Manifest, ShotSplit, TrainSet};
