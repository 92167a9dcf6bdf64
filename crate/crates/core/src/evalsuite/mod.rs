//! Metrics, the variant runner, sweeps, analytics and report output.

pub mod analytics;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod sweep;

pub use analytics::{expert_head_export, weight_survival_export, ExpertHeadExport, SurvivalCurve};
pub use metrics::{accuracy, macro_f1, ConfusionMatrix};
pub use runner::{evaluate, fit, predict, run_variant, Fitted, FittedModel, PredictionReport, Predictions};
pub use sweep::{sweep, SweepGrid, SweepRow};
