//! Experiment runner: configuration, cross-validation, ablation suites and
//! report files.

pub mod ablation;
pub mod config;
pub mod cv;
pub mod report;

pub use ablation::{
    loss_weight_grid, run_ablation_suite, suite_cells, AblationTable, Cell, CellKind, Suite,
};
pub use config::{ExperimentConfig, ModelSettings, TaskSource};
pub use cv::{
    majority_vote, majority_vote_late_fusion, run_cross_validation, stratified_folds, CvSummary,
    PerMetric, Stat,
};
pub use report::{
    emit_report, read_report, render_table, summary_json, Report, SUMMARY_FILE, TABLE_FILE,
};
