//! Correlation metrics, model evaluation and comparison tables.

mod correlation;
mod evaluate;
mod report;

pub use correlation::{average_ranks, plcc, srcc, srcc_closed_form, ScorePairs};
pub use evaluate::{evaluate_model, report_from_scores, EvalLabel, QualityModel};
pub use report::{comparison_table, format_delta, ComparisonTable, CorrelationReport};
