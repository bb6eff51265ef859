//! Metrics, checkpoint evaluation and sweeps.

mod metrics;
mod report;
mod sweep;

pub use metrics::{classify_grounding, p_cover, persona_f1, GroundingJudgment, GroundingLevel, IdfTable, TAU_HARD};
pub use report::{
    evaluate, judge_grounding, perplexity, rtl_accuracy, rtl_predictions, EvalError, EvalOptions, EvalReport, ForcedComparison,
    GroundingCounts, RtlAccuracy,
};
pub use sweep::{format_table, run_row, run_sweep, SweepError, SweepResult, SweepRow, SweepSpec};
