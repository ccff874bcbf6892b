//! Metrics, fold construction, cross-validation and the variant ablation.

pub mod crossval;
pub mod kfold;
pub mod metrics;
pub mod report;

pub use crossval::{cross_validate, ablation_run, CrossValConfig, CrossValOutput, FoldModels};
pub use kfold::{split_hash, stratified_kfold};
pub use metrics::{aggregate_nodule, auroc, confusion_metrics, ConfusionMetrics, MetricSet};
pub use report::{FoldResult, MetricsReport, Prediction, ReportRow, Summary};
