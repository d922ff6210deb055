//! Bias metrics over judge-score base rates, the naive word-swap baseline,
//! and report rendering.

mod bias;
mod naive;
mod report;
mod wasserstein;

pub use bias::{aggregate_overall, direct_bias, evaluate_attribute, indirect_bias, AttributeBias, OptionBias};
pub use naive::NaiveSwap;
pub use report::{emit_report, histogram, render_markdown, render_tsv, ReportFiles, TradeoffRow, HISTOGRAM_BINS};
pub use wasserstein::{w2_distance, w2_distance_on_grid};
