//! Evaluation metrics, configuration, experiment orchestration, and
//! self-checks — the machinery that turns the method modules into a tool.

pub mod config;
pub mod metrics;
pub mod report;
pub mod run;
pub mod selfcheck;

pub use config::Config;
pub use metrics::{argmax_labels, confusion_counts, shape_miou, EmptyUnion};
pub use report::{CategoryReport, EvalReport, MetricRecord};
pub use run::{
    evaluate_model, init_thread_pool, majority_baseline, run_training, ModelKind, TrainSummary,
};
pub use selfcheck::run_selfcheck;
