//! Evaluation metrics, the experiment runner with its ablation variants,
//! and the report files.

mod diagnostics;
mod experiment;
mod format;
mod metrics;
mod report;

pub use diagnostics::{final_quarter, iou_curve, path_mask, IOU_SPARSITY};
pub use experiment::{
    evaluate, prepare, run_variant, run_variant_on, write_run, ExperimentConfig, MetricsRecord, Variant, VariantRun, METRICS_HEADER,
};
pub use format::fmt_sig;
pub use metrics::{eval_asr, eval_false_refusal, eval_utility, first_token_rate};
pub use report::{report, Report, SPARSITY_GRID};
