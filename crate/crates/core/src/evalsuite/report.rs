//! On-disk output: run bundles and fitted models.
//!
//! A run bundle directory holds `report.json`, `predictions.csv` and, depending on the
//! variant, `head_ranking.csv` (sav) or `weights.csv`, `reliability.csv`, `survival.csv`
//! and `expert_heads.csv` (calm). Nothing in a bundle depends on wall-clock time, so two
//! runs with the same inputs produce byte-identical directories.
//!
//! A model directory holds `model.json` and `centroids.bin`, the latter in the tensor
//! layout of the feature store but with magic `CALMCT01` and f64 values, so a reloaded
//! model predicts exactly as the one that was fitted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalsuite::analytics::{expert_head_export, weight_survival_export};
use crate::evalsuite::runner::{
    Diagnostics, Fitted, FittedModel, Metrics, PredictionReport, Predictions, PseudoLabelSummary,
};
use crate::feature_store::{write_json, FeatureSet, Manifest};
use crate::prototype::CentroidBank;
use crate::sav::top_k_indices;

pub const CENTROID_MAGIC: &[u8; 8] = b"CALMCT01";

/// Float format for every CSV cell: 17 significant digits, enough to round-trip an f64.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let kind = match e.kind() {
        csv::ErrorKind::Io(err) => err.kind(),
        _ => std::io::ErrorKind::Other,
    };
    Error::io(path, std::io::Error::new(kind, e.to_string()))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub model_id: String,
    pub num_examples: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub config: RunConfig,
    pub resolved_k: usize,
    pub dataset: DatasetSummary,
    pub train_examples: usize,
    pub train_class_counts: Vec<usize>,
    pub test_examples: usize,
    pub metrics: Option<Metrics>,
    pub pseudo_labels: Option<PseudoLabelSummary>,
    pub diagnostics: Diagnostics,
    /// Selected heads, best first (sav only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_heads: Option<Vec<usize>>,
}

impl ReportJson {
    pub fn new(report: &PredictionReport, fs: &FeatureSet) -> Self {
        let m = fs.manifest();
        Self {
            config: report.config.clone(),
            resolved_k: report.fitted.model.k,
            dataset: DatasetSummary {
                model_id: m.model_id.clone(),
                num_examples: fs.num_examples(),
                num_heads: fs.num_heads(),
                head_dim: fs.head_dim(),
                num_classes: fs.num_classes(),
            },
            train_examples: report.train.len(),
            train_class_counts: report.train.class_counts(fs.num_classes()),
            test_examples: report.predictions.rows.len(),
            metrics: report.metrics.clone(),
            pseudo_labels: report.pseudo_labels.clone(),
            diagnostics: report.diagnostics.clone(),
            selected_heads: report.fitted.model.ranking.as_ref().map(|r| r.selected.clone()),
        }
    }
}

/// Writes `predictions.csv`: ids, true and predicted classes, and the three best scores.
pub fn write_predictions_csv(path: &Path, fs: &FeatureSet, preds: &Predictions) -> Result<()> {
    let names = &fs.manifest().class_names;
    let top = preds.num_classes.min(3);
    let mut header = vec!["example_id", "true_index", "true_name", "pred_index", "pred_name"];
    let rank_cols: Vec<String> = (1..=top)
        .flat_map(|r| [format!("class_{r}"), format!("score_{r}")])
        .collect();
    header.extend(rank_cols.iter().map(String::as_str));
    let rows = preds.rows.iter().enumerate().map(|(r, &i)| {
        let truth = fs.labels().map(|l| l[i]);
        let p = preds.predicted[r];
        let mut row = vec![
            fs.example_id(i).to_string(),
            truth.map_or_else(String::new, |t| t.to_string()),
            truth.map_or_else(String::new, |t| names[t].clone()),
            p.to_string(),
            names[p].clone(),
        ];
        let scores = preds.scores_for(r);
        for c in top_k_indices(scores, top) {
            row.push(names[c].clone());
            row.push(fmt_float(scores[c]));
        }
        row
    });
    write_rows(path, &header, rows)
}

fn write_calm_tables(dir: &Path, model: &FittedModel, manifest: &Manifest) -> Result<()> {
    let (Some(wm), Some(rel)) = (&model.weights, &model.reliability) else {
        return Ok(());
    };
    let names = &model.class_names;
    let class_of = |row: usize| model.active_classes[row];
    let coords = |head: usize| match manifest.head_coordinates(head) {
        Some((l, h)) => (l.to_string(), h.to_string()),
        None => (String::new(), String::new()),
    };

    let mut rows = Vec::new();
    for (row, selected) in wm.selected.iter().enumerate() {
        for (rank, &head) in selected.iter().enumerate() {
            let (l, h) = coords(head);
            rows.push(vec![
                class_of(row).to_string(),
                names[class_of(row)].clone(),
                (rank + 1).to_string(),
                head.to_string(),
                l,
                h,
                fmt_float(rel.row(row)[head]),
                fmt_float(wm.row(row)[head]),
            ]);
        }
    }
    write_rows(
        &dir.join("weights.csv"),
        &["class", "class_name", "rank", "head", "layer", "head_in_layer", "reliability", "weight"],
        rows,
    )?;

    let rel_rows: Vec<usize> = match rel.mode {
        crate::calm::WeightingMode::Global => vec![0],
        crate::calm::WeightingMode::Local => (0..rel.num_classes).collect(),
    };
    let rows = rel_rows.into_iter().flat_map(|row| {
        let label = match rel.mode {
            crate::calm::WeightingMode::Global => ("*".to_string(), "*".to_string()),
            crate::calm::WeightingMode::Local => (class_of(row).to_string(), names[class_of(row)].clone()),
        };
        rel.row(row)
            .iter()
            .enumerate()
            .map(move |(head, &v)| vec![label.0.clone(), label.1.clone(), head.to_string(), fmt_float(v)])
            .collect::<Vec<_>>()
    });
    write_rows(&dir.join("reliability.csv"), &["class", "class_name", "head", "reliability"], rows)?;

    let curves = weight_survival_export(wm);
    let rows = curves.iter().flat_map(|curve| {
        curve.points.iter().map(move |p| {
            vec![
                class_of(curve.class).to_string(),
                p.rank.to_string(),
                p.head.to_string(),
                fmt_float(p.weight),
                fmt_float(p.cumulative),
                fmt_float(p.survival),
                fmt_float(curve.uniform_reference),
            ]
        })
    });
    write_rows(
        &dir.join("survival.csv"),
        &["class", "rank", "head", "weight", "cumulative", "survival", "uniform_reference"],
        rows,
    )?;

    let experts = expert_head_export(wm, manifest, &model.active_classes);
    let rows = experts.per_class.iter().map(|e| {
        vec![
            e.class.to_string(),
            names[e.class].clone(),
            e.head.to_string(),
            e.layer.map_or_else(String::new, |v| v.to_string()),
            e.head_in_layer.map_or_else(String::new, |v| v.to_string()),
            fmt_float(e.weight),
        ]
    });
    write_rows(
        &dir.join("expert_heads.csv"),
        &["class", "class_name", "head", "layer", "head_in_layer", "weight"],
        rows,
    )?;
    write_json(&dir.join("expert_heads.json"), &experts)
}

fn write_sav_table(dir: &Path, model: &FittedModel, manifest: &Manifest) -> Result<()> {
    let Some(ranking) = &model.ranking else {
        return Ok(());
    };
    let order = top_k_indices(&ranking.accuracy, ranking.accuracy.len());
    let rows = order.iter().enumerate().map(|(rank, &head)| {
        let (l, h) = manifest
            .head_coordinates(head)
            .map_or((String::new(), String::new()), |(l, h)| (l.to_string(), h.to_string()));
        vec![
            (rank + 1).to_string(),
            head.to_string(),
            l,
            h,
            fmt_float(ranking.accuracy[head]),
            (rank < ranking.selected.len()).to_string(),
        ]
    });
    write_rows(
        &dir.join("head_ranking.csv"),
        &["rank", "head", "layer", "head_in_layer", "train_accuracy", "selected"],
        rows,
    )
}

/// Writes the analytics tables of a fitted model into `dir`.
pub fn write_model_tables(dir: &Path, model: &FittedModel, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_calm_tables(dir, model, manifest)?;
    write_sav_table(dir, model, manifest)
}

pub fn write_bundle(dir: &Path, report: &PredictionReport, fs: &FeatureSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("report.json"), &ReportJson::new(report, fs))?;
    write_predictions_csv(&dir.join("predictions.csv"), fs, &report.predictions)?;
    write_model_tables(dir, &report.fitted.model, fs.manifest())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    model: FittedModel,
    class_counts: Vec<usize>,
}

pub fn save_model(dir: &Path, fitted: &Fitted) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bank = &fitted.bank;
    write_json(
        &dir.join("model.json"),
        &ModelFile {
            model: fitted.model.clone(),
            class_counts: bank.class_counts.clone(),
        },
    )?;
    let mut bytes = Vec::with_capacity(32 + bank.centroids.len() * 8);
    bytes.extend_from_slice(CENTROID_MAGIC);
    for dim in [bank.num_heads, bank.num_classes, bank.head_dim] {
        bytes.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for v in &bank.centroids {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join("centroids.bin");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: &Path) -> Result<Fitted> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    let path = dir.join("centroids.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() < 32 {
        return Err(Error::ShapeMismatch(format!("{}: truncated header", path.display())));
    }
    if &bytes[..8] != CENTROID_MAGIC {
        return Err(Error::MagicMismatch {
            expected: String::from_utf8_lossy(CENTROID_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    let dim = |i: usize| {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[8 + 8 * i..16 + 8 * i]);
        u64::from_le_bytes(b) as usize
    };
    let (k, c, d) = (dim(0), dim(1), dim(2));
    let body = &bytes[32..];
    if k.checked_mul(c).and_then(|x| x.checked_mul(d)).and_then(|x| x.checked_mul(8)) != Some(body.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} data bytes for K={k} C={c} d={d}",
            path.display(),
            body.len()
        )));
    }
    let centroids = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let model = file.model;
    if k != model.num_heads || d != model.head_dim || c != model.active_classes.len() {
        return Err(Error::ShapeMismatch(format!(
            "centroids K={k} C={c} d={d} disagree with model.json"
        )));
    }
    let bank = CentroidBank::from_centroids(k, c, d, centroids, file.class_counts)?;
    Ok(Fitted {
        model,
        bank,
        train_zero_norm_count: 0,
    })
}
