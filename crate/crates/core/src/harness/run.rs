//! Run directories.
//!
//! ```text
//! <out_dir>/config.toml     config echo, enough to repeat the run
//! <out_dir>/metrics.jsonl   every logged event
//! <out_dir>/checkpoint.bin  final agent and top-agent buffer
//! <out_dir>/run_meta.json   outcome summary
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::rlcore::{read_metrics, train, write_checkpoint, EvalResult, MetricsLog, TrainOutcome};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const META_FILE: &str = "run_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub status: String,
    pub error: Option<String>,
    pub frames: u64,
    pub episodes: u64,
    pub updates: u64,
    pub perturbations: u64,
    pub final_eval: Option<EvalResult>,
    pub elapsed_secs: f64,
    pub version: String,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub outcome: TrainOutcome,
}

impl RunArtifacts {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }
}

/// Trains `cfg` into its output directory.
///
/// A failed run still leaves its config echo, the metrics written so far
/// (ending in an `abort` record) and a `run_meta.json` with the error.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    let train_cfg = cfg.train_config()?;
    train_cfg.validate()?;
    let dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&dir)?;
    let mut echo = cfg.clone();
    echo.out_dir = dir.to_string_lossy().into_owned();
    std::fs::write(dir.join(CONFIG_FILE), echo.echo())?;

    let start = Instant::now();
    let mut log = MetricsLog::create(&dir.join(METRICS_FILE))?;
    let result = train(&train_cfg, &mut log);
    let elapsed_secs = start.elapsed().as_secs_f64();
    let version = env!("CARGO_PKG_VERSION").to_string();
    match result {
        Ok(outcome) => {
            if cfg.save_checkpoint {
                write_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.agent, &outcome.top_agents, &cfg.env)?;
            }
            let meta = RunMeta {
                status: "completed".into(),
                error: None,
                frames: outcome.frames,
                episodes: outcome.episodes,
                updates: outcome.updates,
                perturbations: outcome.perturbations,
                final_eval: outcome.final_eval.clone(),
                elapsed_secs,
                version,
            };
            write_meta(&dir, &meta)?;
            Ok(RunArtifacts { dir, meta, outcome })
        }
        Err(e) => {
            let meta = RunMeta {
                status: "failed".into(),
                error: Some(e.to_string()),
                frames: 0,
                episodes: 0,
                updates: 0,
                perturbations: 0,
                final_eval: None,
                elapsed_secs,
                version,
            };
            write_meta(&dir, &meta)?;
            Err(e)
        }
    }
}

fn write_meta(dir: &Path, meta: &RunMeta) -> Result<()> {
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<RunMeta> {
    let text = std::fs::read_to_string(dir.join(META_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Metrics of a run directory, or of a metrics file given directly.
pub fn load_run_metrics(path: &Path) -> Result<Vec<serde_json::Value>> {
    let file = if path.is_dir() { path.join(METRICS_FILE) } else { path.to_path_buf() };
    if !file.exists() {
        return Err(Error::Config(format!("no metrics found at {}", file.display())));
    }
    read_metrics(&file)
}

/// Config echo of a run directory.
pub fn load_run_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join(CONFIG_FILE))
}
