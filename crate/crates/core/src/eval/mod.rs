//! Metrics, grouped reports, parity exports and leave-one-region-out splits.

mod loso;
mod metrics;
mod report;

pub use loso::{loso_split, run_loso, LosoReport, LosoRun, LosoSplit, RegionMask};
pub use metrics::{
    average_ranks, compute_metrics, mae, mape, r2, rmse, spearman, Metrics, RangeFilter, Spearman, MAPE_EPSILON,
};
pub use report::{
    evaluate_records, idw_baseline, parity_csv, parity_export, row_metrics, seasonal_report, sig_digits, EvalRow,
    SeasonalCell, Summary, ALL, REPORT_HEX_RESOLUTION,
};
