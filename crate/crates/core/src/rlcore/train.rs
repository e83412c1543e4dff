//! Interaction loop: acting, replay, updates, top-agent tracking and
//! periodic perturbation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::agent::{ActorStats, Agent, AgentConfig, CriticStats, GradLoss, Networks, TrunkKind};
use super::eval::{evaluate_with_routes, EvalResult};
use super::metrics::MetricsLog;
use super::replay::{ReplayBuffer, Transition};
use super::schedule::ExplorationSchedule;
use crate::analysis::{conflict_in, eval_weights, grad_cosine, GradientRecord};
use crate::dormant::DormantConfig;
use crate::envs::{Env, EnvSpec};
use crate::error::{Error, Result};
use crate::moe::expert_usage;
use crate::perturb::{
    apply_perturbation, perturb_factor, sample_candidate, CandidateSource, ParamLayout, PerturbConfig,
    TopAgentBuffer, WeightVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    /// Candidates drawn from the top-agent distribution.
    Oriented,
    /// Candidates drawn from the weight initializer.
    Random,
    Off,
}

impl PerturbMode {
    pub fn source(self) -> Option<CandidateSource> {
        match self {
            PerturbMode::Oriented => Some(CandidateSource::Oriented),
            PerturbMode::Random => Some(CandidateSource::Random),
            PerturbMode::Off => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub agent: AgentConfig,
    pub seed: u64,
    pub total_frames: u64,
    pub action_repeat: usize,
    /// Agent steps between gradient updates.
    pub update_every: usize,
    /// Frames collected before the first update.
    pub seed_frames: u64,
    /// Agent steps that take uniformly random actions.
    pub exploration_steps: u64,
    pub schedule: ExplorationSchedule,
    pub replay_capacity: usize,
    pub perturb_mode: PerturbMode,
    pub perturb: PerturbConfig,
    pub top_agents: usize,
    pub dormant: DormantConfig,
    pub eval_every_frames: u64,
    pub eval_episodes: usize,
    pub snapshot_every_frames: u64,
    /// 0 disables gradient-conflict measurements.
    pub conflict_every_frames: u64,
    pub conflict_batch: usize,
    pub conflict_loss: GradLoss,
    /// Log per-step routing during the final evaluation (MoE trunk only).
    pub route_log: bool,
    /// Episodes used to score each perturbation candidate on its own; 0 skips it.
    pub candidate_eval_episodes: usize,
}

impl TrainConfig {
    /// Defaults for a given environment at full scale.
    pub fn for_env(env: EnvSpec) -> Self {
        Self {
            env,
            agent: AgentConfig::default(),
            seed: 1,
            total_frames: 1_000_000,
            action_repeat: 2,
            update_every: 2,
            seed_frames: 4000,
            exploration_steps: 2000,
            schedule: ExplorationSchedule::new(1.0, 0.1, 3_000_000),
            replay_capacity: 1_000_000,
            perturb_mode: PerturbMode::Oriented,
            perturb: PerturbConfig::default(),
            top_agents: 10,
            dormant: DormantConfig::default(),
            eval_every_frames: 10_000,
            eval_episodes: 10,
            snapshot_every_frames: 1000,
            conflict_every_frames: 0,
            conflict_batch: 256,
            conflict_loss: GradLoss::Actor,
            route_log: true,
            candidate_eval_episodes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.schedule.validate()?;
        self.dormant.validate()?;
        if self.perturb_mode != PerturbMode::Off {
            self.perturb.validate()?;
        }
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.action_repeat == 0 || self.update_every == 0 {
            return bad("action_repeat and update_every must be positive");
        }
        if self.replay_capacity == 0 || self.top_agents == 0 {
            return bad("replay_capacity and top_agents must be positive");
        }
        if self.snapshot_every_frames == 0 || self.eval_every_frames == 0 {
            return bad("snapshot_every_frames and eval_every_frames must be positive");
        }
        if self.conflict_every_frames > 0 && self.conflict_batch == 0 {
            return bad("conflict_batch must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub top_agents: TopAgentBuffer,
    pub frames: u64,
    pub episodes: u64,
    pub updates: u64,
    pub perturbations: u64,
    pub final_eval: Option<EvalResult>,
}

/// Independent random streams of one run.
struct Streams {
    act: ChaCha8Rng,
    update: ChaCha8Rng,
    perturb: ChaCha8Rng,
    probe: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Seed of the `i`-th evaluation environment of a run.
pub fn eval_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1_000_003 + i)
}

/// Builds the agent a run with this config starts from.
pub fn initial_agent(cfg: &TrainConfig) -> Result<Agent> {
    Agent::new(cfg.agent.clone(), cfg.env.obs_shape(), cfg.env.action_dim(), &mut stream(cfg.seed, 0))
}

/// Flattened weights of every network that perturbation touches.
pub fn perturb_layout(agent: &Agent) -> Arc<ParamLayout> {
    Arc::new(ParamLayout::of(&agent.nets, "", &|_| true))
}

/// Weights of a freshly initialised agent with the same architecture.
pub fn fresh_weights<R: Rng + ?Sized>(agent: &Agent, layout: &Arc<ParamLayout>, rng: &mut R) -> Result<WeightVector> {
    let nets = Networks::new(&agent.cfg, agent.obs_shape(), agent.action_dim(), rng)?;
    WeightVector::flatten_with(&nets, "", layout.clone())
}

struct Runner<'a> {
    cfg: &'a TrainConfig,
    log: &'a mut MetricsLog,
    agent: Agent,
    buffer: ReplayBuffer,
    top: TopAgentBuffer,
    layout: Arc<ParamLayout>,
    rng: Streams,
    frame: u64,
    updates: u64,
    perturbations: u64,
    evals: u64,
    last_critic: Option<CriticStats>,
    last_actor: Option<ActorStats>,
}

impl Runner<'_> {
    fn snapshot(&mut self) -> Result<()> {
        let mut fields = json!({
            "stddev": self.cfg.schedule.stddev(self.frame),
            "updates": self.updates,
            "buffer": self.buffer.len(),
        });
        if let Some(c) = self.last_critic {
            fields["critic_loss"] = c.critic_loss.into();
            fields["q1_mean"] = c.q1_mean.into();
        }
        if let Some(a) = self.last_actor {
            fields["actor_loss"] = a.actor_loss.into();
            if let Some(lb) = a.lb_loss {
                fields["lb_loss"] = lb.into();
            }
        }
        if !self.buffer.is_empty() {
            let probe = self.buffer.sample_obs(self.cfg.dormant.probe_batch_size, &mut self.rng.probe)?;
            let rep = self.agent.dormant_report(&probe, self.cfg.dormant.tau, self.cfg.dormant.include_encoder)?;
            fields["beta"] = rep.ratio.into();
            if self.cfg.agent.trunk == TrunkKind::Moe {
                let usage = expert_usage(&self.agent.route_batch(&probe)?)?;
                let entropy: f64 = usage.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
                fields["usage"] = json!(usage);
                fields["usage_entropy"] = entropy.into();
            }
        }
        self.log.emit(self.frame, "snapshot", fields)
    }

    fn eval(&mut self, final_eval: bool) -> Result<EvalResult> {
        let seed = eval_seed(self.cfg.seed, self.evals);
        self.evals += 1;
        let routes = final_eval && self.cfg.route_log && self.cfg.agent.trunk == TrunkKind::Moe;
        let (res, records) = evaluate_with_routes(
            &self.agent,
            &self.cfg.env,
            self.cfg.eval_episodes,
            seed,
            self.cfg.action_repeat,
            routes,
        )?;
        self.log.emit(
            self.frame,
            "eval",
            json!({
                "mean_return": res.mean_return,
                "std_return": res.std_return,
                "success_rate": res.success_rate,
                "returns": res.returns,
                "tasks": res.tasks,
                "final": final_eval,
            }),
        )?;
        for r in records {
            self.log.emit(self.frame, "route", serde_json::to_value(r)?)?;
        }
        Ok(res)
    }

    fn measure_conflict(&mut self) -> Result<()> {
        let groups: Vec<usize> = self.buffer.group_counts().into_iter().map(|(g, _)| g).collect();
        if groups.len() < 2 {
            return Ok(());
        }
        let stddev = self.cfg.schedule.stddev(self.frame);
        let mut records = Vec::new();
        for g in groups {
            let Some(batch) = self.buffer.sample_group(g, self.cfg.conflict_batch, &mut self.rng.probe)? else {
                continue;
            };
            let grad = self.agent.trunk_gradient(&batch, self.cfg.conflict_loss, stddev, &mut self.rng.probe)?;
            records.push(GradientRecord { group: g, gradient: grad, step: self.frame });
        }
        let m = grad_cosine(&records)?;
        self.log.emit(
            self.frame,
            "conflict",
            json!({
                "groups": m.groups,
                "cosine": m.values,
                "conflict": conflict_in(&m),
                "loss": self.cfg.conflict_loss,
                "params": "actor.trunk",
            }),
        )
    }

    fn perturb(&mut self, source: CandidateSource) -> Result<()> {
        let probe = self.buffer.sample_obs(self.cfg.dormant.probe_batch_size, &mut self.rng.probe)?;
        let beta = self
            .agent
            .dormant_report(&probe, self.cfg.dormant.tau, self.cfg.dormant.include_encoder)?
            .ratio;
        let alpha = perturb_factor(beta, &self.cfg.perturb);
        let theta = WeightVector::flatten_with(&self.agent.nets, "", self.layout.clone())?;
        let (agent, layout) = (&self.agent, &self.layout);
        let mut init_err = None;
        let (phi, used) = sample_candidate(
            source,
            &self.top,
            |r: &mut ChaCha8Rng| match fresh_weights(agent, layout, r) {
                Ok(w) => w,
                Err(e) => {
                    init_err = Some(e);
                    theta.clone()
                }
            },
            &mut self.rng.perturb,
        );
        if let Some(e) = init_err {
            return Err(e);
        }
        let candidate = if self.cfg.candidate_eval_episodes > 0 {
            let seed = eval_seed(self.cfg.seed, (1 << 32) + self.perturbations);
            let r = eval_weights(
                &self.agent,
                &phi,
                &self.cfg.env,
                self.cfg.candidate_eval_episodes,
                seed,
                self.cfg.action_repeat,
            )?;
            json!({ "mean_return": r.mean_return, "success_rate": r.success_rate })
        } else {
            serde_json::Value::Null
        };
        let mixed = apply_perturbation(&theta, &phi, alpha)?;
        mixed.unflatten_into(&mut self.agent.nets, "")?;
        self.agent.reset_optimizer(&["encoder", "actor", "critic1", "critic2"]);
        self.perturbations += 1;
        self.log.emit(
            self.frame,
            "perturb",
            json!({
                "beta": beta,
                "alpha": alpha,
                "requested": source,
                "source": used,
                "top_size": self.top.len(),
                "top_rewards": self.top.rewards(),
                "candidate": candidate,
            }),
        )
    }
}

/// Runs one training job, logging every event to `log`.
pub fn train(cfg: &TrainConfig, log: &mut MetricsLog) -> Result<TrainOutcome> {
    cfg.validate()?;
    log.emit(0, "header", json!({ "format": 1, "config": cfg }))?;
    let agent = initial_agent(cfg)?;
    let layout = perturb_layout(&agent);
    let mut runner = Runner {
        buffer: ReplayBuffer::new(
            cfg.replay_capacity,
            cfg.env.obs_shape().numel(),
            cfg.env.action_dim(),
            cfg.agent.n_step,
            cfg.agent.gamma,
        )?,
        top: TopAgentBuffer::new(cfg.top_agents)?,
        layout,
        agent,
        rng: Streams {
            act: stream(cfg.seed, 1),
            update: stream(cfg.seed, 2),
            perturb: stream(cfg.seed, 3),
            probe: stream(cfg.seed, 4),
        },
        cfg,
        log,
        frame: 0,
        updates: 0,
        perturbations: 0,
        evals: 0,
        last_critic: None,
        last_actor: None,
    };
    match run(&mut runner) {
        Ok(outcome) => Ok(outcome),
        Err(e) => {
            let frame = runner.frame;
            // Best effort: the original error matters more than a failed log line.
            let _ = runner.log.emit(frame, "abort", json!({ "error": e.to_string() }));
            Err(e)
        }
    }
}

fn run(r: &mut Runner<'_>) -> Result<TrainOutcome> {
    let cfg = r.cfg;
    let mut env = Env::make(cfg.env.clone(), cfg.seed);
    let adim = cfg.env.action_dim();
    let interval = cfg.perturb.interval_frames;
    let mut next_perturb = interval;
    let mut next_snapshot = cfg.snapshot_every_frames;
    let mut next_eval = cfg.eval_every_frames;
    let mut next_conflict = cfg.conflict_every_frames;

    let mut obs = env.reset();
    let (mut agent_steps, mut episodes) = (0u64, 0u64);
    let (mut ep_return, mut ep_len, mut ep_success) = (0.0, 0u64, false);

    while r.frame < cfg.total_frames {
        let action = if agent_steps < cfg.exploration_steps {
            (0..adim).map(|_| r.rng.act.random_range(-1.0..=1.0)).collect()
        } else {
            r.agent.act(&obs, r.frame, true, &cfg.schedule, &mut r.rng.act)?
        };
        let group = env.group_label();
        let task = env.task_id();
        let mut reward = 0.0;
        let mut step = None;
        for _ in 0..cfg.action_repeat {
            let s = env.step(&action)?;
            r.frame += 1;
            reward += s.reward;
            let done = s.done;
            step = Some(s);
            if done {
                break;
            }
        }
        let step = step.expect("action_repeat >= 1");
        r.buffer.push(Transition {
            obs: std::mem::take(&mut obs),
            action,
            reward,
            next_obs: step.obs.clone(),
            terminal: step.terminal,
            done: step.done,
            group,
        })?;
        agent_steps += 1;
        ep_return += reward;
        ep_len += 1;
        ep_success |= step.info.success;

        if r.frame >= cfg.seed_frames && agent_steps % cfg.update_every as u64 == 0 {
            let batch = r.buffer.sample(cfg.agent.batch_size, &mut r.rng.update)?;
            let (c, a) = r.agent.update(&batch, cfg.schedule.stddev(r.frame), &mut r.rng.update)?;
            r.last_critic = Some(c);
            r.last_actor = Some(a);
            r.updates += 1;
        }
        obs = step.obs;

        if step.done {
            episodes += 1;
            let inserted = if cfg.perturb_mode != PerturbMode::Off {
                let w = WeightVector::flatten_with(&r.agent.nets, "", r.layout.clone())?;
                r.top.maybe_insert(w, ep_return)?
            } else {
                false
            };
            r.log.emit(
                r.frame,
                "episode",
                json!({
                    "episode": episodes,
                    "return": ep_return,
                    "length": ep_len,
                    "success": ep_success,
                    "task": task,
                    "top_inserted": inserted,
                }),
            )?;
            if let Some(source) = cfg.perturb_mode.source() {
                if r.frame >= next_perturb {
                    r.perturb(source)?;
                    while next_perturb <= r.frame {
                        next_perturb += interval;
                    }
                }
            }
            obs = env.reset();
            ep_return = 0.0;
            ep_len = 0;
            ep_success = false;
        }

        if r.frame >= next_snapshot {
            r.snapshot()?;
            while next_snapshot <= r.frame {
                next_snapshot += cfg.snapshot_every_frames;
            }
        }
        if cfg.conflict_every_frames > 0 && r.frame >= next_conflict {
            if r.frame >= cfg.seed_frames {
                r.measure_conflict()?;
            }
            while next_conflict <= r.frame {
                next_conflict += cfg.conflict_every_frames;
            }
        }
        if cfg.eval_episodes > 0 && r.frame >= next_eval && r.frame < cfg.total_frames {
            r.eval(false)?;
            while next_eval <= r.frame {
                next_eval += cfg.eval_every_frames;
            }
        }
    }

    let final_eval = if cfg.total_frames > 0 && cfg.eval_episodes > 0 {
        Some(r.eval(true)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        agent: r.agent.clone(),
        top_agents: r.top.clone(),
        frames: r.frame,
        episodes,
        updates: r.updates,
        perturbations: r.perturbations,
        final_eval,
    })
}
