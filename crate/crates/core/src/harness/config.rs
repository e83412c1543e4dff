//! Flat key/value run configuration.
//!
//! Values are layered: the chosen preset, then the config file, then
//! command-line overrides. Every key of [`RunConfig`] may appear at each layer
//! and anything else is rejected by name.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dormant::DormantConfig;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::perturb::PerturbConfig;
use crate::rlcore::{AgentConfig, ExplorationSchedule, GradLoss, PerturbMode, TrainConfig, TrunkKind};

/// Environment variable naming the directory that holds run directories.
pub const OUT_ROOT_VAR: &str = "MOERL_OUT";
/// Environment variable bounding how many runs the ablation driver executes at once.
pub const THREADS_VAR: &str = "MOERL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Shrunk widths and horizons that finish in seconds on one CPU core.
    Desk,
    /// Full-scale hyperparameters.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub env: String,
    pub trunk: TrunkKind,
    pub perturb: PerturbMode,
    pub seed: u64,
    pub total_frames: u64,
    /// Empty means `$MOERL_OUT/<run name>` (or `runs/<run name>`).
    pub out_dir: String,
    pub save_checkpoint: bool,

    pub action_repeat: usize,
    pub update_every: usize,
    pub seed_frames: u64,
    pub exploration_steps: u64,
    pub stddev_init: f64,
    pub stddev_final: f64,
    pub stddev_horizon_frames: u64,
    pub stddev_clip: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub n_step: usize,
    pub gamma: f64,
    pub lr: f64,
    pub actor_lr_scale: f64,
    pub soft_update_rate: f64,

    pub latent_dim: usize,
    pub critic_hidden: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub trunk_out: usize,
    pub mlp_hidden: usize,
    pub lb_weight: f64,
    pub aug_pad: usize,

    pub alpha_min: f64,
    pub alpha_max: f64,
    pub perturb_rate: f64,
    pub perturb_interval_frames: u64,
    pub top_agents: usize,
    pub dormant_tau: f64,
    pub dormant_probe_batch: usize,
    pub dormant_include_encoder: bool,

    pub eval_every_frames: u64,
    pub eval_episodes: usize,
    pub candidate_eval_episodes: usize,
    pub snapshot_every_frames: u64,
    pub conflict_every_frames: u64,
    pub conflict_batch: usize,
    pub conflict_loss: GradLoss,
    pub route_log: bool,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let agent = AgentConfig::default();
        let perturb = PerturbConfig::default();
        let dormant = DormantConfig::default();
        let full = Self {
            preset,
            env: "sparse_goal".into(),
            trunk: TrunkKind::Moe,
            perturb: PerturbMode::Oriented,
            seed: 1,
            total_frames: 3_000_000,
            out_dir: String::new(),
            save_checkpoint: true,
            action_repeat: 2,
            update_every: 2,
            seed_frames: 4000,
            exploration_steps: 2000,
            stddev_init: 1.0,
            stddev_final: 0.1,
            stddev_horizon_frames: 3_000_000,
            stddev_clip: agent.stddev_clip,
            replay_capacity: 1_000_000,
            batch_size: agent.batch_size,
            n_step: agent.n_step,
            gamma: agent.gamma,
            lr: agent.lr,
            actor_lr_scale: agent.actor_lr_scale,
            soft_update_rate: agent.soft_update_rate,
            latent_dim: agent.latent_dim,
            critic_hidden: agent.critic_hidden,
            num_experts: agent.num_experts,
            top_k: agent.top_k,
            expert_hidden: agent.expert_hidden,
            trunk_out: agent.trunk_out,
            mlp_hidden: agent.mlp_hidden,
            lb_weight: agent.lb_weight,
            aug_pad: agent.aug_pad,
            alpha_min: perturb.alpha_min,
            alpha_max: perturb.alpha_max,
            perturb_rate: perturb.rate,
            perturb_interval_frames: perturb.interval_frames,
            top_agents: 10,
            dormant_tau: dormant.tau,
            dormant_probe_batch: dormant.probe_batch_size,
            dormant_include_encoder: dormant.include_encoder,
            eval_every_frames: 10_000,
            eval_episodes: 10,
            candidate_eval_episodes: 0,
            snapshot_every_frames: 1000,
            conflict_every_frames: 0,
            conflict_batch: 256,
            conflict_loss: GradLoss::Actor,
            route_log: true,
        };
        match preset {
            Preset::Paper => full,
            Preset::Desk => Self {
                total_frames: 30_000,
                seed_frames: 1000,
                exploration_steps: 500,
                stddev_horizon_frames: 15_000,
                replay_capacity: 100_000,
                batch_size: 64,
                lr: 1e-3,
                latent_dim: 32,
                critic_hidden: 64,
                expert_hidden: 32,
                trunk_out: 32,
                perturb_interval_frames: 6000,
                dormant_probe_batch: 128,
                eval_every_frames: 1000,
                eval_episodes: 8,
                candidate_eval_episodes: 5,
                conflict_batch: 128,
                ..full
            },
        }
    }

    /// Layers `file` (if any) and `overrides` over a preset. The preset is
    /// taken from the overrides, then the file, then defaults to desk.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file_table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let preset = match overrides.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => match file_table.get("preset") {
                Some(Value::String(s)) => s.parse()?,
                Some(v) => return Err(Error::Config(format!("key `preset`: expected a string, got {v}"))),
                None => Preset::Desk,
            },
        };
        let mut table = Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in file_table {
            set_key(&mut table, &k, v)?;
        }
        for (k, raw) in overrides {
            let v = parse_value(raw);
            set_key(&mut table, k, v)?;
        }
        let cfg: Self = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config echo or any complete config file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::resolve(Some(path), &[])
    }

    /// Canonical text form; loading it back yields an identical config.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::parse(&self.env)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let env = self.env_spec()?;
        Ok(TrainConfig {
            env,
            agent: AgentConfig {
                trunk: self.trunk,
                latent_dim: self.latent_dim,
                num_experts: self.num_experts,
                top_k: self.top_k,
                expert_hidden: self.expert_hidden,
                trunk_out: self.trunk_out,
                mlp_hidden: self.mlp_hidden,
                critic_hidden: self.critic_hidden,
                lr: self.lr,
                actor_lr_scale: self.actor_lr_scale,
                gamma: self.gamma,
                n_step: self.n_step,
                soft_update_rate: self.soft_update_rate,
                lb_weight: self.lb_weight,
                batch_size: self.batch_size,
                stddev_clip: self.stddev_clip,
                aug_pad: self.aug_pad,
            },
            seed: self.seed,
            total_frames: self.total_frames,
            action_repeat: self.action_repeat,
            update_every: self.update_every,
            seed_frames: self.seed_frames,
            exploration_steps: self.exploration_steps,
            schedule: ExplorationSchedule::new(self.stddev_init, self.stddev_final, self.stddev_horizon_frames),
            replay_capacity: self.replay_capacity,
            perturb_mode: self.perturb,
            perturb: PerturbConfig {
                alpha_min: self.alpha_min,
                alpha_max: self.alpha_max,
                rate: self.perturb_rate,
                interval_frames: self.perturb_interval_frames,
            },
            top_agents: self.top_agents,
            dormant: DormantConfig {
                tau: self.dormant_tau,
                probe_batch_size: self.dormant_probe_batch,
                include_encoder: self.dormant_include_encoder,
            },
            eval_every_frames: self.eval_every_frames,
            eval_episodes: self.eval_episodes,
            snapshot_every_frames: self.snapshot_every_frames,
            conflict_every_frames: self.conflict_every_frames,
            conflict_batch: self.conflict_batch,
            conflict_loss: self.conflict_loss,
            route_log: self.route_log,
            candidate_eval_episodes: self.candidate_eval_episodes,
        })
    }

    /// Directory name used when `out_dir` is empty.
    pub fn run_name(&self) -> String {
        let env: String = self
            .env
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '-' })
            .collect();
        let trunk = match self.trunk {
            TrunkKind::Moe => "moe",
            TrunkKind::Mlp => "mlp",
        };
        let perturb = match self.perturb {
            PerturbMode::Oriented => "oriented",
            PerturbMode::Random => "random",
            PerturbMode::Off => "off",
        };
        format!("{env}_{trunk}_{perturb}_s{}", self.seed)
    }

    pub fn resolved_out_dir(&self) -> PathBuf {
        if !self.out_dir.is_empty() {
            return PathBuf::from(&self.out_dir);
        }
        out_root().join(self.run_name())
    }
}

/// Root for run directories: `$MOERL_OUT` or `runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Worker count from `$MOERL_THREADS`, defaulting to 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}

fn set_key(table: &mut Table, key: &str, value: Value) -> Result<()> {
    match table.get_mut(key) {
        Some(slot) => {
            // Integers are accepted where floats are expected.
            *slot = match (&*slot, value) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            Ok(())
        }
        None => Err(Error::Config(format!("unknown config key `{key}`"))),
    }
}

/// Parses an override value as a TOML scalar, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override {s:?} is not of the form key=value"))),
    }
}
