//! Metrics, evaluation runs, ablation presets, and report emission.

mod ablation;
mod metrics;
mod report;

pub use ablation::{
    parse_seeds, run_ablation, run_ablation_on, AblationReport, AblationRow, AblationSpec, AblationTable, EncoderSource,
    Preset, Showcase, Splits, Workbench, METRICS, TABLE_SCHEMA_VERSION,
};

pub use metrics::{
    confusion, evaluate, evaluate_with, miou, psnr, ConfusionMatrix, EvalInput, Metrics, Psnr, PSNR_CAP,
};
pub use report::{colorize, emit_report, overlay, strip, CURVE_SCHEMA_VERSION, IGNORE_COLOR, PALETTE, SHOWCASE_SAMPLES};
