//! Run configuration shared by the library runner and the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calm::ReliabilityKind;
use crate::error::{Error, Result};
use crate::prototype::Metric;

pub const DEFAULT_TAU_P: f64 = 0.03;
/// Posterior temperature for many-class label sets.
pub const MANY_CLASS_TAU_P: f64 = 0.001;
pub const DEFAULT_TAU_W: f64 = 0.5;
pub const DEFAULT_TOPK_FRACTION: f64 = 0.3;
pub const DEFAULT_SHOTS: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Temperature grid used for hyperparameter sweeps over both `tau_p` and `tau_w`.
pub const TEMPERATURE_GRID: [f64; 5] = [0.001, 0.03, 0.1, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Top-k heads by training accuracy, uniform hard voting.
    Sav,
    /// One reliability-derived weight per head.
    CalmGlobal,
    /// Per-class reliability-derived head weights.
    #[default]
    CalmLocal,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Sav => "sav",
            Variant::CalmGlobal => "calm_global",
            Variant::CalmLocal => "calm_local",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sav" => Ok(Variant::Sav),
            "calm_global" => Ok(Variant::CalmGlobal),
            "calm_local" => Ok(Variant::CalmLocal),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant {other:?} (expected sav, calm_global or calm_local)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Head sparsity, absolute or as a fraction of the available heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopK {
    Absolute(usize),
    Fraction(f64),
}

impl Default for TopK {
    fn default() -> Self {
        TopK::Fraction(DEFAULT_TOPK_FRACTION)
    }
}

impl TopK {
    /// Number of heads to keep out of `num_heads`, at least 1 and at most `num_heads`.
    pub fn resolve(self, num_heads: usize) -> usize {
        let k = match self {
            TopK::Absolute(k) => k,
            TopK::Fraction(f) => (f * num_heads as f64).ceil() as usize,
        };
        k.clamp(1, num_heads.max(1))
    }

    pub fn validate(self) -> Result<()> {
        match self {
            TopK::Absolute(0) => Err(Error::InvalidConfig("--topk must be at least 1".into())),
            TopK::Fraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::InvalidConfig(format!(
                "--topk-frac must lie in (0, 1], got {f}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::Absolute(k) => write!(f, "{k}"),
            TopK::Fraction(x) => write!(f, "{x}K"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub tau_p: f64,
    pub tau_w: f64,
    pub topk: TopK,
    pub shots: usize,
    pub seed: u64,
    pub metric: Metric,
    pub reliability: ReliabilityKind,
    pub threshold: f64,
    pub allow_missing_classes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::default(),
            tau_p: DEFAULT_TAU_P,
            tau_w: DEFAULT_TAU_W,
            topk: TopK::default(),
            shots: DEFAULT_SHOTS,
            seed: 0,
            metric: Metric::Cosine,
            reliability: ReliabilityKind::Margin,
            threshold: DEFAULT_THRESHOLD,
            allow_missing_classes: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("tau_p", self.tau_p), ("tau_w", self.tau_w)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::NonPositiveTau { name, value });
            }
        }
        self.topk.validate()?;
        if self.shots == 0 {
            return Err(Error::InvalidConfig("--shots must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidThreshold(self.threshold));
        }
        Ok(())
    }
}

/// Flat TOML config file; every key mirrors a command-line flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigFile {
    pub features: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub variant: Option<String>,
    pub tau_p: Option<f64>,
    pub tau_w: Option<f64>,
    pub topk: Option<usize>,
    pub topk_frac: Option<f64>,
    pub shots: Option<usize>,
    pub seed: Option<u64>,
    pub metric: Option<String>,
    pub reliability: Option<String>,
    pub rollouts: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub allow_missing_classes: Option<bool>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Applies the file's values over `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(v) = self.tau_p {
            cfg.tau_p = v;
        }
        if let Some(v) = self.tau_w {
            cfg.tau_w = v;
        }
        match (self.topk, self.topk_frac) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig("set only one of topk and topk-frac".into()))
            }
            (Some(k), None) => cfg.topk = TopK::Absolute(k),
            (None, Some(f)) => cfg.topk = TopK::Fraction(f),
            (None, None) => {}
        }
        if let Some(v) = self.shots {
            cfg.shots = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.metric {
            cfg.metric = v.parse()?;
        }
        if let Some(v) = &self.reliability {
            cfg.reliability = v.parse()?;
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = self.allow_missing_classes {
            cfg.allow_missing_classes = v;
        }
        Ok(())
    }
}
