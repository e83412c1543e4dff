//! Command-line surface: configuration layering, run directories, the
//! ablation driver and figure generation.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod figures;
pub mod run;

pub use ablate::{ablate, AblationReport, AblationSpec, CurveMetric, Variant};
pub use config::{out_root, parse_override, thread_count, Preset, RunConfig, OUT_ROOT_VAR, THREADS_VAR};
pub use figures::{cosine_matrices, log_conflict_fraction, plot, render, Figure};
pub use run::{load_run_config, load_run_metrics, read_meta, run, RunArtifacts, RunMeta};
