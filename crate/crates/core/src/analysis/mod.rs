//! Diagnostics over trained agents and run logs.

mod candidates;
mod conflict;
mod efficiency;
pub mod plot;
mod usage;

pub use candidates::{eval_candidates, eval_weights, CandidateEval};
pub use conflict::{conflict_fraction, conflict_in, grad_cosine, mean_cosine, CosineMatrix, GradientRecord};
pub use efficiency::{efficiency, efficiency_from_times, time_to_threshold, worst_final, EfficiencyReport, MethodEfficiency};
pub use usage::{route_records, run_trunk, usage_matrix, usage_matrix_from_log, GroupBy, UsageMatrix};
