//! The `calm` command line.
//!
//! Settings resolve as flags, then the `--config` TOML file, then built-in defaults.
//! Exit status is 0 on success, 1 when inputs fail validation and 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::{ConfigFile, RunConfig, TopK, Variant, TEMPERATURE_GRID};
use crate::error::{Error, Result};
use crate::evalsuite::report::{self, write_bundle, write_model_tables, write_predictions_csv};
use crate::evalsuite::runner::{self, evaluate, fit, predict};
use crate::evalsuite::sweep::{self, SweepGrid};
use crate::feature_store::{self, load_feature_set, read_manifest, sample_shots, write_json, FeatureSet, ShotSplit};
use crate::pseudo_label::{filter_pseudo_labels, RolloutSet};
use crate::synthgen::{self, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "calm", version, about = "Few-shot classification with attention-head voting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a feature tensor and manifest (and optionally a rollout file).
    Validate(DataArgs),
    /// Sample a class-balanced few-shot split and write it as JSON.
    Split(SplitArgs),
    /// Fit centroids, reliabilities and weights; write a model directory.
    Fit(RunArgs),
    /// Classify every example of a feature set with a fitted model.
    Predict(PredictArgs),
    /// Split, fit, predict and score in one go; write a report bundle.
    Eval(RunArgs),
    /// Run a grid of configurations and write sweep_summary.csv.
    Sweep(SweepArgs),
    /// Filter rollout votes into pseudo-labels.
    PseudoLabel(PseudoArgs),
    /// Generate a synthetic planted-expert feature set.
    Synth(SynthArgs),
    /// Write weight, survival and expert-head tables for a fitted model.
    ExportAnalytics(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Feature tensor file.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Manifest JSON describing the tensor.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Pseudo-label rollouts (JSON lines).
    #[arg(long)]
    pub rollouts: Option<PathBuf>,
    /// TOML file whose keys mirror these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub tau_p: Option<f64>,
    #[arg(long)]
    pub tau_w: Option<f64>,
    /// Heads kept, as a count.
    #[arg(long, conflicts_with = "topk_frac")]
    pub topk: Option<usize>,
    /// Heads kept, as a fraction of all heads.
    #[arg(long)]
    pub topk_frac: Option<f64>,
    /// Training shots per class.
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// cosine or dot.
    #[arg(long)]
    pub metric: Option<String>,
    /// margin, no_margin or posterior_mean.
    #[arg(long)]
    pub reliability: Option<String>,
    /// Minimum rollout agreement for a pseudo-label.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Fit without classes that have no training examples instead of failing.
    #[arg(long)]
    pub allow_missing_classes: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Use this split (from `calm split`) instead of sampling one.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Model directory written by `calm fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated grid axes; each defaults to the single resolved value.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',')]
    pub tau_p_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub tau_w_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub topk_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub topk_frac_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub shots_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Sweep both temperatures over 0.001, 0.03, 0.1, 1, 2.
    #[arg(long)]
    pub temperature_grid: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PseudoArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output JSON file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// SynthSpec JSON; the built-in benchmark spec when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Output directory for features.bin, manifest.json and ground_truth.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `std::env::args`, runs the command and returns the exit status.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("CALM_LOG", "warn")).try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            match usage_flag(&e) {
                Some(flag) => eprintln!("error: {flag}: {e}"),
                None => eprintln!("error: {e}"),
            }
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn usage_flag(e: &Error) -> Option<&'static str> {
    match e {
        Error::NonPositiveTau { name: "tau_p", .. } => Some("--tau-p"),
        Error::NonPositiveTau { name: "tau_w", .. } => Some("--tau-w"),
        Error::InvalidThreshold(_) => Some("--threshold"),
        _ => None,
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(0) => Err(Error::InvalidConfig("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start {n} worker threads: {e}")))?
            .install(f),
    }
}

/// Flags merged over the config file merged over defaults.
struct Resolved {
    cfg: RunConfig,
    features: Option<PathBuf>,
    manifest: Option<PathBuf>,
    rollouts: Option<PathBuf>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
}

fn resolve(data: &DataArgs, args: Option<&ConfigArgs>, out: Option<&PathBuf>, jobs: Option<usize>) -> Result<Resolved> {
    let file = match &data.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut cfg = RunConfig::default();
    file.apply(&mut cfg)?;
    if let Some(a) = args {
        if let Some(v) = a.variant {
            cfg.variant = v;
        }
        if let Some(v) = a.tau_p {
            cfg.tau_p = v;
        }
        if let Some(v) = a.tau_w {
            cfg.tau_w = v;
        }
        if let Some(k) = a.topk {
            cfg.topk = TopK::Absolute(k);
        }
        if let Some(f) = a.topk_frac {
            cfg.topk = TopK::Fraction(f);
        }
        if let Some(v) = a.shots {
            cfg.shots = v;
        }
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        if let Some(v) = &a.metric {
            cfg.metric = v.parse()?;
        }
        if let Some(v) = &a.reliability {
            cfg.reliability = v.parse()?;
        }
        if let Some(v) = a.threshold {
            cfg.threshold = v;
        }
        cfg.allow_missing_classes |= a.allow_missing_classes;
    }
    Ok(Resolved {
        cfg,
        features: data.features.clone().or(file.features),
        manifest: data.manifest.clone().or(file.manifest),
        rollouts: data.rollouts.clone().or(file.rollouts),
        out: out.cloned().or(file.out),
        jobs: jobs.or(file.jobs),
    })
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("{flag} is required")))
}

impl Resolved {
    fn feature_set(&self) -> Result<FeatureSet> {
        load_feature_set(required(&self.manifest, "--manifest")?, required(&self.features, "--features")?)
    }

    fn rollout_set(&self, fs: &FeatureSet) -> Result<Option<RolloutSet>> {
        self.rollouts
            .as_deref()
            .map(|p| RolloutSet::load(p, fs.manifest()))
            .transpose()
    }
}

fn write_json_or_stdout<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
                context: "stdout".into(),
                source,
            })?;
            println!("{text}");
            Ok(())
        }
    }
}

fn read_split(path: &Path) -> Result<ShotSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Validate(data) => {
            let r = resolve(&data, None, None, None)?;
            let fs = r.feature_set()?;
            let m = fs.manifest();
            println!(
                "ok: {} examples, {} heads x {} dims, {} classes, labels {}",
                fs.num_examples(),
                fs.num_heads(),
                fs.head_dim(),
                fs.num_classes(),
                if m.labels.is_some() { "present" } else { "absent" }
            );
            if let Some(rs) = r.rollout_set(&fs)? {
                println!("ok: {} rollout rows x {} rollouts", rs.example_ids.len(), rs.num_rollouts);
            }
            Ok(())
        }
        Command::Split(a) => {
            let r = resolve(&a.data, None, a.out.as_ref(), None)?;
            let fs = r.feature_set()?;
            let shots = a.shots.unwrap_or(r.cfg.shots);
            let split = sample_shots(&fs, shots, a.seed.unwrap_or(r.cfg.seed))?;
            write_json_or_stdout(r.out.as_deref(), &split)
        }
        Command::Fit(a) => {
            let r = resolve(&a.data, Some(&a.cfg), a.out.as_ref(), a.jobs)?;
            let out = required(&r.out, "--out")?.to_path_buf();
            r.cfg.validate()?;
            let fs = r.feature_set()?;
            let rollouts = r.rollout_set(&fs)?;
            with_pool(r.jobs, || {
                let fitted = match &a.split {
                    Some(p) => fit(&fs, &read_split(p)?.train_set(&fs)?, &r.cfg)?,
                    None => evaluate(&fs, &r.cfg, rollouts.as_ref())?.fitted,
                };
                report::save_model(&out, &fitted)?;
                write_model_tables(&out, &fitted.model, fs.manifest())?;
                info!("model written to {}", out.display());
                Ok(())
            })
        }
        Command::Predict(a) => {
            let r = resolve(&a.data, None, a.out.as_ref(), a.jobs)?;
            let out = required(&r.out, "--out")?.to_path_buf();
            let fs = r.feature_set()?;
            let fitted = report::load_model(&a.model)?;
            with_pool(r.jobs, || {
                let rows: Vec<usize> = (0..fs.num_examples()).collect();
                let preds = predict(&fs, &rows, &fitted.model, &fitted.bank)?;
                fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                write_predictions_csv(&out.join("predictions.csv"), &fs, &preds)?;
                if let Some(metrics) = runner::score(&fs, &rows, &preds.predicted)? {
                    write_json(&out.join("metrics.json"), &metrics)?;
                    println!("accuracy {:.4} macro_f1 {:.4}", metrics.accuracy, metrics.macro_f1);
                }
                Ok(())
            })
        }
        Command::Eval(a) => {
            let r = resolve(&a.data, Some(&a.cfg), a.out.as_ref(), a.jobs)?;
            r.cfg.validate()?;
            let fs = r.feature_set()?;
            let rollouts = r.rollout_set(&fs)?;
            let report = with_pool(r.jobs, || match &a.split {
                Some(p) => {
                    let split = read_split(p)?;
                    runner::run_variant(&fs, &split.train_set(&fs)?, &split.test_indices, &r.cfg)
                }
                None => evaluate(&fs, &r.cfg, rollouts.as_ref()),
            })?;
            if let Some(m) = &report.metrics {
                println!(
                    "{} accuracy {:.4} macro_f1 {:.4} ({} test examples)",
                    r.cfg.variant, m.accuracy, m.macro_f1, m.num_scored
                );
            }
            if let Some(out) = &r.out {
                write_bundle(out, &report, &fs)?;
                info!("report bundle written to {}", out.display());
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let r = resolve(&a.data, Some(&a.cfg), a.out.as_ref(), a.jobs)?;
            let out = required(&r.out, "--out")?.to_path_buf();
            r.cfg.validate()?;
            let mut grid = SweepGrid::from_config(&r.cfg);
            if a.temperature_grid {
                grid.tau_p = TEMPERATURE_GRID.to_vec();
                grid.tau_w = TEMPERATURE_GRID.to_vec();
            }
            if !a.variants.is_empty() {
                grid.variants = a.variants.clone();
            }
            if !a.tau_p_grid.is_empty() {
                grid.tau_p = a.tau_p_grid.clone();
            }
            if !a.tau_w_grid.is_empty() {
                grid.tau_w = a.tau_w_grid.clone();
            }
            if !a.topk_grid.is_empty() || !a.topk_frac_grid.is_empty() {
                grid.topk = a.topk_grid.iter().map(|&k| TopK::Absolute(k)).collect();
                grid.topk.extend(a.topk_frac_grid.iter().map(|&f| TopK::Fraction(f)));
            }
            if !a.shots_grid.is_empty() {
                grid.shots = a.shots_grid.clone();
            }
            if !a.seeds.is_empty() {
                grid.seeds = a.seeds.clone();
            }
            let fs = r.feature_set()?;
            let rollouts = r.rollout_set(&fs)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let rows = with_pool(r.jobs, || sweep::sweep(&fs, &r.cfg, &grid, rollouts.as_ref(), Some(&out)))?;
            sweep::write_summary_csv(&out.join("sweep_summary.csv"), &rows)?;
            println!("{} cells written to {}", rows.len(), out.join("sweep_summary.csv").display());
            Ok(())
        }
        Command::PseudoLabel(a) => {
            let mut r = resolve(&a.data, None, a.out.as_ref(), None)?;
            if let Some(t) = a.threshold {
                r.cfg.threshold = t;
            }
            r.cfg.validate()?;
            let manifest = read_manifest(required(&r.manifest, "--manifest")?)?;
            let rs = RolloutSet::load(required(&r.rollouts, "--rollouts")?, &manifest)?;
            let pl = filter_pseudo_labels(&rs, r.cfg.threshold)?;
            eprintln!("kept {} of {} examples", pl.kept.len(), rs.example_ids.len());
            write_json_or_stdout(r.out.as_deref(), &pl)
        }
        Command::Synth(a) => {
            let mut spec = match &a.spec {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&text).map_err(|source| Error::Json {
                        context: p.display().to_string(),
                        source,
                    })?
                }
                None => SynthSpec::benchmark(0),
            };
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let reshaped = a.classes.is_some() || a.heads.is_some();
            let c = a.classes.unwrap_or(spec.num_classes);
            let k = a.heads.unwrap_or(spec.num_heads);
            let d = a.head_dim.unwrap_or(spec.head_dim);
            let per = a.per_class.unwrap_or(spec.examples_per_class);
            let gap = a.gap.unwrap_or(spec.expert_gap);
            let noise = a.noise.unwrap_or(if a.gap.is_some() { gap / 4.0 } else { spec.noise_std });
            if reshaped {
                spec = SynthSpec::planted(c, k, d, per, gap, noise, spec.seed);
            } else {
                spec.head_dim = d;
                spec.examples_per_class = per;
                spec.head_offset *= gap / spec.expert_gap.max(f64::MIN_POSITIVE);
                spec.expert_gap = gap;
                spec.noise_std = noise;
            }
            let (fs, truth) = synthgen::generate(&spec)?;
            fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            feature_store::save_feature_set(&fs, &a.out.join("manifest.json"), &a.out.join("features.bin"))?;
            write_json(&a.out.join("ground_truth.json"), &truth)?;
            println!(
                "wrote {} examples, {} heads x {} dims to {}",
                fs.num_examples(),
                fs.num_heads(),
                fs.head_dim(),
                a.out.display()
            );
            Ok(())
        }
        Command::ExportAnalytics(a) => {
            let r = resolve(&a.data, None, None, None)?;
            let manifest = read_manifest(required(&r.manifest, "--manifest")?)?;
            let fitted = report::load_model(&a.model)?;
            write_model_tables(&a.out, &fitted.model, &manifest)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "tau-p = 0.1\ntau-w = 2.0\nshots = 3\n").unwrap();
        let cli = Cli::try_parse_from(["calm", "eval", "--config", path.to_str().unwrap(), "--tau-p", "0.5"]).unwrap();
        let Command::Eval(a) = cli.command else { unreachable!() };
        let r = resolve(&a.data, Some(&a.cfg), None, None).unwrap();
        assert_eq!(r.cfg.tau_p, 0.5);
        assert_eq!(r.cfg.tau_w, 2.0);
        assert_eq!(r.cfg.shots, 3);
        assert_eq!(r.cfg.threshold, crate::config::DEFAULT_THRESHOLD);
    }
}
