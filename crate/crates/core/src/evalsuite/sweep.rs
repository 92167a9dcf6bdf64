//! Cartesian hyperparameter sweeps with one summary row per cell.
//!
//! Cells are evaluated in parallel on the current rayon pool. Each finished cell is
//! written to `cells/<key>.json` under the output directory, and a rerun skips cells
//! whose file already exists, so an interrupted sweep resumes where it stopped. The
//! summary table is always assembled in grid order.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TopK, Variant};
use crate::error::{Error, Result};
use crate::evalsuite::report::fmt_float;
use crate::evalsuite::runner::evaluate;
use crate::feature_store::{write_json, FeatureSet};
use crate::pseudo_label::RolloutSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub variants: Vec<Variant>,
    pub tau_p: Vec<f64>,
    pub tau_w: Vec<f64>,
    pub topk: Vec<TopK>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    /// A single-cell grid holding the values of `cfg`.
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            variants: vec![cfg.variant],
            tau_p: vec![cfg.tau_p],
            tau_w: vec![cfg.tau_w],
            topk: vec![cfg.topk],
            shots: vec![cfg.shots],
            seeds: vec![cfg.seed],
        }
    }

    pub fn len(&self) -> usize {
        self.variants.len()
            * self.tau_p.len()
            * self.tau_w.len()
            * self.topk.len()
            * self.shots.len()
            * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every cell as a full config, in grid order (variant slowest, seed fastest).
    pub fn cells(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &variant in &self.variants {
            for &tau_p in &self.tau_p {
                for &tau_w in &self.tau_w {
                    for &topk in &self.topk {
                        for &shots in &self.shots {
                            for &seed in &self.seeds {
                                out.push(RunConfig {
                                    variant,
                                    tau_p,
                                    tau_w,
                                    topk,
                                    shots,
                                    seed,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// File-name-safe identifier of a cell.
pub fn cell_key(cfg: &RunConfig) -> String {
    format!(
        "{}_tp{}_tw{}_k{}_s{}_seed{}",
        cfg.variant, cfg.tau_p, cfg.tau_w, cfg.topk, cfg.shots, cfg.seed
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: String,
    pub config: RunConfig,
    pub resolved_k: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub clip_exact_match: Option<f64>,
}

pub fn run_cell(fs: &FeatureSet, cfg: &RunConfig, rollouts: Option<&RolloutSet>) -> Result<SweepRow> {
    let report = evaluate(fs, cfg, rollouts)?;
    let m = report.metrics.as_ref();
    Ok(SweepRow {
        key: cell_key(cfg),
        config: cfg.clone(),
        resolved_k: report.fitted.model.k,
        train_examples: report.train.len(),
        test_examples: report.predictions.rows.len(),
        accuracy: m.map(|m| m.accuracy),
        macro_f1: m.map(|m| m.macro_f1),
        clip_exact_match: m.map(|m| m.clip_exact_match),
    })
}

fn read_cell(path: &Path, key: &str) -> Option<SweepRow> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str::<SweepRow>(&text).ok().filter(|row| row.key == key)
}

/// Runs every cell of `grid` over `base`. With `out`, finished cells are cached under
/// `out/cells` and reused on the next call.
pub fn sweep(
    fs: &FeatureSet,
    base: &RunConfig,
    grid: &SweepGrid,
    rollouts: Option<&RolloutSet>,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grid has an empty axis".into()));
    }
    let cells = grid.cells(base);
    for cfg in &cells {
        cfg.validate()?;
    }
    let cell_dir: Option<PathBuf> = out.map(|o| o.join("cells"));
    if let Some(dir) = &cell_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    cells
        .par_iter()
        .map(|cfg| {
            let key = cell_key(cfg);
            let path = cell_dir.as_ref().map(|d| d.join(format!("{key}.json")));
            if let Some(row) = path.as_deref().and_then(|p| read_cell(p, &key)) {
                info!("skipping finished cell {key}");
                return Ok(row);
            }
            let row = run_cell(fs, cfg, rollouts)?;
            if let Some(p) = &path {
                write_json(p, &row)?;
            }
            Ok(row)
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_float);
    let mut text = String::from(
        "key,variant,tau_p,tau_w,topk,k,shots,seed,train_examples,test_examples,accuracy,macro_f1,clip_exact_match\n",
    );
    for r in rows {
        let c = &r.config;
        text.push_str(&[
            r.key.clone(),
            c.variant.to_string(),
            fmt_float(c.tau_p),
            fmt_float(c.tau_w),
            c.topk.to_string(),
            r.resolved_k.to_string(),
            c.shots.to_string(),
            c.seed.to_string(),
            r.train_examples.to_string(),
            r.test_examples.to_string(),
            opt(r.accuracy),
            opt(r.macro_f1),
            opt(r.clip_exact_match),
        ]
        .join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
