//! `moerl` subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::ablate::{ablate, AblationSpec, CurveMetric};
use super::config::{out_root, parse_override, thread_count, RunConfig};
use super::figures::{cosine_matrices, plot, Figure};
use super::run::{load_run_config, load_run_metrics, run, CHECKPOINT_FILE};
use crate::analysis::{conflict_fraction, eval_candidates, mean_cosine, usage_matrix_from_log, GroupBy};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::perturb::CandidateSource;
use crate::rlcore::{evaluate, read_checkpoint};

#[derive(Debug, Parser)]
#[command(name = "moerl", version, about = "MoE actor-critic with task-oriented perturbation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint without exploration noise.
    Eval(EvalArgs),
    /// Run the four ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Render a figure from run logs.
    Plot(PlotArgs),
    /// Print a JSON summary of a run.
    Analyze(AnalyzeArgs),
}

/// Config layering shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat TOML config file; a run's config.toml repeats that run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `desk` or `paper`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Environment spec, e.g. `sparse_goal` or `opposing:k=4`.
    #[arg(long)]
    pub env: Option<String>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self, extra: Vec<(String, Option<String>)>) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let named = [("preset", self.preset.clone()), ("env", self.env.clone())];
        for (k, v) in named.into_iter().map(|(k, v)| (k.to_string(), v)).chain(extra) {
            if let Some(v) = v {
                out.push((k, v));
            }
        }
        for s in &self.set {
            out.push(parse_override(s)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// `moe` or `mlp`.
    #[arg(long)]
    pub trunk: Option<String>,
    /// `oriented`, `random` or `off`.
    #[arg(long)]
    pub perturb: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<u64>,
    /// Run directory; defaults to `$MOERL_OUT/<run name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory or checkpoint file.
    pub target: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate on another environment with the same observation and action shapes.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub action_repeat: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub frames: Option<u64>,
    /// Ablation directory; defaults to `$MOERL_OUT/ablate_<env>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `success_rate` or `mean_return`.
    #[arg(long, default_value = "success_rate")]
    pub metric: String,
    /// Threshold for time-to-threshold; defaults to the worst variant's final value.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// dormant, candidate, usage[:task|stage|time:W], conflict or learning.
    pub figure: String,
    /// Run directories or metrics files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory; defaults to the first run.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub what: Analysis,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Expert usage matrix from the final evaluation routing.
    Usage {
        run: PathBuf,
        #[arg(long, default_value = "task")]
        group_by: String,
    },
    /// Conflict fraction and mean cosine matrix.
    Conflict { runs: Vec<PathBuf> },
    /// Returns of oriented and random perturbation candidates of a finished run.
    Candidates {
        run: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Plot(a) => plot_cmd(a),
        Command::Analyze(a) => analyze_cmd(a.what),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let overrides = a.config.overrides(vec![
        ("trunk".into(), a.trunk),
        ("perturb".into(), a.perturb),
        ("seed".into(), a.seed.map(|s| s.to_string())),
        ("total_frames".into(), a.frames.map(|f| f.to_string())),
        ("out_dir".into(), a.out.map(|p| toml_string(&p))),
    ])?;
    let cfg = RunConfig::resolve(a.config.config.as_deref(), &overrides)?;
    if a.dry_run {
        print!("{}", cfg.echo());
        return Ok(());
    }
    let art = run(&cfg)?;
    eprintln!("run directory: {}", art.dir.display());
    print_json(&serde_json::to_value(&art.meta)?)
}

/// Quotes a path so the override parser keeps it as a string.
fn toml_string(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let path = if a.target.is_dir() { a.target.join(CHECKPOINT_FILE) } else { a.target.clone() };
    let ck = read_checkpoint(&path)?;
    let spec = EnvSpec::parse(a.env.as_deref().unwrap_or(&ck.arch.env))?;
    let res = evaluate(&ck.agent, &spec, a.episodes, a.seed, a.action_repeat)?;
    print_json(&json!({ "env": spec.to_string(), "seed": a.seed, "result": res }))
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let overrides = a.config.overrides(vec![("total_frames".into(), a.frames.map(|f| f.to_string()))])?;
    let base = RunConfig::resolve(a.config.config.as_deref(), &overrides)?;
    let out_dir = a.out.unwrap_or_else(|| out_root().join(format!("ablate_{}", base.run_name())));
    let spec = AblationSpec {
        base,
        seeds: a.seeds,
        out_dir,
        metric: a.metric.parse::<CurveMetric>()?,
        threshold: a.threshold,
        workers: thread_count()?,
    };
    let report = ablate(&spec)?;
    eprintln!("ablation directory: {}", spec.out_dir.display());
    print!("{}", report.efficiency_csv());
    if !report.failures.is_empty() {
        for f in &report.failures {
            eprintln!("failed: {} seed {}: {}", f.variant, f.seed, f.error);
        }
        return Err(Error::Contract(format!("{} ablation runs failed", report.failures.len())));
    }
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let figure: Figure = a.figure.parse()?;
    let out = match a.out {
        Some(o) => o,
        None => {
            let first = &a.runs[0];
            if first.is_dir() { first.clone() } else { first.parent().map(Path::to_path_buf).unwrap_or_default() }
        }
    };
    let (svg, csv) = plot(figure, &a.runs, &out)?;
    println!("{}\n{}", svg.display(), csv.display());
    Ok(())
}

fn analyze_cmd(what: Analysis) -> Result<()> {
    match what {
        Analysis::Usage { run, group_by } => {
            let log = load_run_metrics(&run)?;
            let m = usage_matrix_from_log(&log, group_by.parse::<GroupBy>()?)?;
            print_json(&json!({ "usage": m, "dominant": m.dominant() }))
        }
        Analysis::Conflict { runs } => {
            let mut out = Vec::new();
            for r in &runs {
                let ms = cosine_matrices(&load_run_metrics(r)?)?;
                out.push(json!({
                    "run": r.display().to_string(),
                    "measurements": ms.len(),
                    "conflict_fraction": conflict_fraction(&ms),
                    "mean_cosine": mean_cosine(&ms),
                }));
            }
            print_json(&json!(out))
        }
        Analysis::Candidates { run, n, episodes, seed } => {
            let cfg = load_run_config(&run)?;
            let ck = read_checkpoint(&run.join(CHECKPOINT_FILE))?;
            let spec = cfg.env_spec()?;
            let mut out = serde_json::Map::new();
            for src in [CandidateSource::Oriented, CandidateSource::Random] {
                let evals = eval_candidates(&ck.agent, &ck.top_agents, src, &spec, n, episodes, seed, cfg.action_repeat)?;
                let mean = evals.iter().map(|c| c.mean_return).sum::<f64>() / evals.len().max(1) as f64;
                out.insert(
                    serde_json::to_value(src)?.as_str().unwrap_or("source").to_string(),
                    json!({ "mean_return": mean, "candidates": evals }),
                );
            }
            out.insert("floor_return".into(), json!(spec.floor_return()));
            print_json(&serde_json::Value::Object(out))
        }
    }
}
