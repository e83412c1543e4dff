//! Actor-critic networks and their gradient updates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::replay::Batch;
use super::schedule::ExplorationSchedule;
use crate::autodiff::{join, random_shift, Adam, Conv2d, Gradients, Linear, Mlp, Module, Tape, Tensor, Var};
use crate::dormant::{dormant_report, DormantReport, HiddenActivations};
use crate::envs::ObsShape;
use crate::error::{contract_err, Error, Result};
use crate::moe::{load_balance_loss_tape, GateResult, MoeLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrunkKind {
    Moe,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub trunk: TrunkKind,
    pub latent_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    /// Width of the trunk output fed to the action head.
    pub trunk_out: usize,
    /// Hidden width of the MLP trunk; 0 picks the width whose parameter count
    /// matches the MoE trunk.
    pub mlp_hidden: usize,
    pub critic_hidden: usize,
    pub lr: f64,
    /// Actor learning rate as a multiple of `lr`.
    pub actor_lr_scale: f64,
    pub gamma: f64,
    pub n_step: usize,
    pub soft_update_rate: f64,
    pub lb_weight: f64,
    pub batch_size: usize,
    pub stddev_clip: f64,
    /// Replicate-padding of the random-shift augmentation (image observations only).
    pub aug_pad: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkKind::Moe,
            latent_dim: 50,
            num_experts: 4,
            top_k: 2,
            expert_hidden: 256,
            trunk_out: 1024,
            mlp_hidden: 0,
            critic_hidden: 1024,
            lr: 1e-4,
            actor_lr_scale: 1.0,
            gamma: 0.99,
            n_step: 3,
            soft_update_rate: 0.01,
            lb_weight: 0.002,
            batch_size: 256,
            stddev_clip: 0.3,
            aug_pad: 4,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_dim == 0 || self.trunk_out == 0 || self.critic_hidden == 0 || self.expert_hidden == 0 {
            return bad("network widths must be positive");
        }
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return bad("need 1 <= top_k <= num_experts");
        }
        if !(self.lr > 0.0) || !(self.actor_lr_scale > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.soft_update_rate) {
            return bad("gamma and soft_update_rate must lie in [0, 1]");
        }
        if self.n_step == 0 || self.batch_size == 0 {
            return bad("n_step and batch_size must be positive");
        }
        if !(self.lb_weight >= 0.0) || !(self.stddev_clip >= 0.0) {
            return bad("lb_weight and stddev_clip must be >= 0");
        }
        Ok(())
    }

    /// Parameter count of the MoE trunk this config describes.
    pub fn moe_trunk_params(&self) -> usize {
        MoeLayer::param_count_for(self.latent_dim, self.expert_hidden, self.trunk_out, self.num_experts)
    }

    /// Hidden width of the MLP trunk: explicit, or matched to the MoE trunk.
    pub fn resolved_mlp_hidden(&self) -> usize {
        if self.mlp_hidden > 0 {
            return self.mlp_hidden;
        }
        let (l, o) = (self.latent_dim as f64, self.trunk_out as f64);
        // l·h + h + h·o + o = P
        let h = (self.moe_trunk_params() as f64 - o) / (l + 1.0 + o);
        (h.round() as usize).max(1)
    }

    pub fn mlp_trunk_params(&self) -> usize {
        let h = self.resolved_mlp_hidden();
        self.latent_dim * h + h + h * self.trunk_out + self.trunk_out
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    /// `tanh(linear(obs))`.
    Vector(Linear),
    /// Two stride-2 3×3 convolutions with relu, then `tanh(linear(flat))`.
    Image { conv1: Conv2d, conv2: Conv2d, proj: Linear, shape: (usize, usize, usize) },
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(obs: ObsShape, latent: usize, rng: &mut R) -> Result<Self> {
        Ok(match obs {
            ObsShape::Vector(d) => Encoder::Vector(Linear::new(d, latent, rng)),
            ObsShape::Image { c, h, w } => {
                let conv1 = Conv2d::new(c, 8, 3, 2, rng);
                let (h1, w1) = conv1.output_hw(h, w)?;
                let conv2 = Conv2d::new(8, 8, 3, 2, rng);
                let (h2, w2) = conv2.output_hw(h1, w1)?;
                let proj = Linear::new(8 * h2 * w2, latent, rng);
                Encoder::Image { conv1, conv2, proj, shape: (c, h, w) }
            }
        })
    }

    /// `x` is `B × obs_numel`; returns `B × latent`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Encoder::Vector(l) => {
                let h = l.forward(tape, x)?;
                tape.tanh(h)
            }
            Encoder::Image { conv1, conv2, proj, shape: (c, h, w) } => {
                let b = tape.shape(x)[0];
                let img = tape.reshape(x, vec![b, *c, *h, *w])?;
                let y = conv1.forward(tape, img)?;
                let y = tape.relu(y)?;
                let y = conv2.forward(tape, y)?;
                let y = tape.relu(y)?;
                let flat = tape.shape(y)[1..].iter().product();
                let y = tape.reshape(y, vec![b, flat])?;
                let y = proj.forward(tape, y)?;
                tape.tanh(y)
            }
        }
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Encoder::Vector(l) => l.visit(&join(prefix, "proj"), f),
            Encoder::Image { conv1, conv2, proj, .. } => {
                conv1.visit(&join(prefix, "conv1"), f);
                conv2.visit(&join(prefix, "conv2"), f);
                proj.visit(&join(prefix, "proj"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Encoder::Vector(l) => l.visit_mut(&join(prefix, "proj"), f),
            Encoder::Image { conv1, conv2, proj, .. } => {
                conv1.visit_mut(&join(prefix, "conv1"), f);
                conv2.visit_mut(&join(prefix, "conv2"), f);
                proj.visit_mut(&join(prefix, "proj"), f);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Trunk {
    Moe(MoeLayer),
    Mlp(Mlp),
}

impl Module for Trunk {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Trunk::Moe(m) => m.visit(prefix, f),
            Trunk::Mlp(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Trunk::Moe(m) => m.visit_mut(prefix, f),
            Trunk::Mlp(m) => m.visit_mut(prefix, f),
        }
    }
}

/// Tape outputs of an actor pass.
#[derive(Debug)]
pub struct ActorForward {
    /// `B × action_dim`, in `[-1, 1]`.
    pub action: Var,
    /// `B × N` router softmax (MoE trunk only).
    pub full_probs: Option<Var>,
    pub gates: Vec<GateResult>,
    pub hidden: Vec<(String, Var)>,
}

/// Trunk followed by `tanh(linear(·))`.
#[derive(Debug, Clone)]
pub struct Actor {
    pub trunk: Trunk,
    pub head: Linear,
}

impl Actor {
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<ActorForward> {
        let (t, full_probs, gates, hidden) = match &self.trunk {
            Trunk::Moe(m) => {
                let f = m.forward_tape(tape, z)?;
                let hidden = f
                    .expert_hidden
                    .iter()
                    .enumerate()
                    .map(|(i, h)| (format!("expert{i}.hidden"), *h))
                    .collect();
                (f.output, Some(f.full_probs), f.gates, hidden)
            }
            Trunk::Mlp(m) => {
                let (out, hidden) = m.forward_with_hidden(tape, z)?;
                let hidden = hidden.into_iter().enumerate().map(|(i, h)| (format!("hidden{i}"), h)).collect();
                (out, None, Vec::new(), hidden)
            }
        };
        let a = self.head.forward(tape, t)?;
        let action = tape.tanh(a)?;
        Ok(ActorForward { action, full_probs, gates, hidden })
    }
}

impl Module for Actor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// `Q(z, a)` as a relu MLP over the concatenation.
pub fn critic_forward(critic: &Mlp, tape: &mut Tape, z: Var, a: Var) -> Result<Var> {
    let x = tape.concat_cols(z, a)?;
    critic.forward(tape, x)
}

/// Every trainable network of the agent (targets excluded).
#[derive(Debug, Clone)]
pub struct Networks {
    pub encoder: Encoder,
    pub actor: Actor,
    pub critic1: Mlp,
    pub critic2: Mlp,
}

pub const ENCODER: &str = "encoder";
pub const ACTOR: &str = "actor";
pub const CRITIC1: &str = "critic1";
pub const CRITIC2: &str = "critic2";

impl Networks {
    pub fn new<R: Rng + ?Sized>(cfg: &AgentConfig, obs: ObsShape, action_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if action_dim == 0 {
            return Err(Error::Config("action_dim must be positive".into()));
        }
        let encoder = Encoder::new(obs, cfg.latent_dim, rng)?;
        let trunk = match cfg.trunk {
            TrunkKind::Moe => Trunk::Moe(MoeLayer::new(
                cfg.latent_dim,
                cfg.expert_hidden,
                cfg.trunk_out,
                cfg.num_experts,
                cfg.top_k,
                rng,
            )?),
            TrunkKind::Mlp => Trunk::Mlp(Mlp::new(&[cfg.latent_dim, cfg.resolved_mlp_hidden(), cfg.trunk_out], rng)),
        };
        let head = Linear::new(cfg.trunk_out, action_dim, rng);
        let critic_sizes = [cfg.latent_dim + action_dim, cfg.critic_hidden, cfg.critic_hidden, 1];
        let critic1 = Mlp::new(&critic_sizes, rng);
        let critic2 = Mlp::new(&critic_sizes, rng);
        Ok(Self { encoder, actor: Actor { trunk, head }, critic1, critic2 })
    }
}

impl Module for Networks {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&join(prefix, ENCODER), f);
        self.actor.visit(&join(prefix, ACTOR), f);
        self.critic1.visit(&join(prefix, CRITIC1), f);
        self.critic2.visit(&join(prefix, CRITIC2), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, ENCODER), f);
        self.actor.visit_mut(&join(prefix, ACTOR), f);
        self.critic1.visit_mut(&join(prefix, CRITIC1), f);
        self.critic2.visit_mut(&join(prefix, CRITIC2), f);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticStats {
    pub critic_loss: f64,
    pub q1_mean: f64,
    pub target_mean: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorStats {
    pub actor_loss: f64,
    /// Absent for the MLP trunk.
    pub lb_loss: Option<f64>,
}

/// Scalar actor loss built on a tape, with its parts.
#[derive(Debug)]
pub struct ActorLoss {
    pub total: Var,
    pub q_term: Var,
    pub lb_term: Option<Var>,
    pub forward: ActorForward,
}

fn accumulate<M: Module + ?Sized>(grads: &Gradients, m: &mut M) -> Result<()> {
    let mut err = None;
    m.visit_mut("", &mut |_, t| {
        if let Err(e) = grads.accumulate_into(t) {
            err.get_or_insert(e);
        }
    });
    err.map_or(Ok(()), Err)
}

fn flat_params<M: Module + ?Sized>(m: &M) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t| out.push(t.data().to_vec()));
    out
}

/// `target ← (1 − rate)·target + rate·online` per coordinate.
pub fn soft_update<M: Module + ?Sized>(online: &M, target: &mut M, rate: f64) -> Result<()> {
    let src = flat_params(online);
    let mut i = 0;
    let mut err = None;
    target.visit_mut("", &mut |name, t| {
        match src.get(i) {
            Some(s) if s.len() == t.numel() => {
                if rate == 1.0 {
                    t.data_mut().copy_from_slice(s);
                } else if rate != 0.0 {
                    t.data_mut().iter_mut().zip(s).for_each(|(d, o)| *d = (1.0 - rate) * *d + rate * o);
                }
            }
            _ => {
                err.get_or_insert_with(|| format!("target {name} does not match online network"));
            }
        }
        i += 1;
    });
    if let Some(e) = err {
        return contract_err(e);
    }
    if i != src.len() {
        return contract_err("target and online differ in parameter count");
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: AgentConfig,
    obs_shape: ObsShape,
    action_dim: usize,
    pub nets: Networks,
    pub target1: Mlp,
    pub target2: Mlp,
    critic_opt: Adam,
    actor_opt: Adam,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(cfg: AgentConfig, obs_shape: ObsShape, action_dim: usize, rng: &mut R) -> Result<Self> {
        let nets = Networks::new(&cfg, obs_shape, action_dim, rng)?;
        let mut target1 = nets.critic1.clone();
        let mut target2 = nets.critic2.clone();
        for t in [&mut target1, &mut target2] {
            t.visit_mut("", &mut |_, p| p.zero_grad());
        }
        Ok(Self {
            critic_opt: Adam::new(cfg.lr),
            actor_opt: Adam::new(cfg.lr * cfg.actor_lr_scale),
            cfg,
            obs_shape,
            action_dim,
            nets,
            target1,
            target2,
        })
    }

    pub fn obs_shape(&self) -> ObsShape {
        self.obs_shape
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn check_obs(&self, len: usize, rows: usize) -> Result<()> {
        if len != rows * self.obs_shape.numel() {
            return contract_err(format!(
                "observation of {} values for shape {:?}",
                len / rows.max(1),
                self.obs_shape
            ));
        }
        Ok(())
    }

    /// Latent features of a `B × obs` batch, without gradient bookkeeping.
    pub fn encode(&self, obs: &Tensor) -> Result<Tensor> {
        let rows = obs.shape().first().copied().unwrap_or(0);
        self.check_obs(obs.numel(), rows)?;
        let mut tape = Tape::new();
        let x = tape.constant(obs);
        let z = self.nets.encoder.forward(&mut tape, x)?;
        Ok(tape.to_tensor(z))
    }

    /// Deterministic policy output for one observation.
    pub fn policy(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.policy_with_gates(obs)?.0)
    }

    /// Policy output plus the routing decision (MoE trunk only).
    pub fn policy_with_gates(&self, obs: &[f64]) -> Result<(Vec<f64>, Option<GateResult>)> {
        self.check_obs(obs.len(), 1)?;
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1, obs.len()], obs.to_vec())?;
        let z = self.nets.encoder.forward(&mut tape, x)?;
        let f = self.nets.actor.forward(&mut tape, z)?;
        Ok((tape.value(f.action).to_vec(), f.gates.into_iter().next()))
    }

    /// Policy action, plus clipped Gaussian noise when exploring, clamped to `[-1, 1]`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        frame: u64,
        explore: bool,
        schedule: &ExplorationSchedule,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut a = self.policy(obs)?;
        if explore {
            let std = schedule.stddev(frame);
            for v in &mut a {
                let noise = (std * rng.sample::<f64, _>(StandardNormal)).clamp(-self.cfg.stddev_clip, self.cfg.stddev_clip);
                *v = (*v + noise).clamp(-1.0, 1.0);
            }
        }
        Ok(a)
    }

    fn augment<R: Rng + ?Sized>(&self, obs: &Tensor, rng: &mut R) -> Result<Tensor> {
        match self.obs_shape {
            ObsShape::Image { c, h, w } if self.cfg.aug_pad > 0 => {
                let b = obs.shape()[0];
                let img = obs.clone().reshape(vec![b, c, h, w])?;
                random_shift(&img, self.cfg.aug_pad, rng)?.reshape(vec![b, c * h * w])
            }
            _ => Ok(obs.clone()),
        }
    }

    /// Clipped double-Q n-step targets for a batch.
    pub fn td_targets<R: Rng + ?Sized>(&self, batch: &Batch, next_z: &Tensor, stddev: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let z = tape.constant(next_z);
        let f = self.nets.actor.forward(&mut tape, z)?;
        let mut a = tape.value(f.action).to_vec();
        for v in &mut a {
            let noise = (stddev * rng.sample::<f64, _>(StandardNormal)).clamp(-self.cfg.stddev_clip, self.cfg.stddev_clip);
            *v = (*v + noise).clamp(-1.0, 1.0);
        }
        let av = tape.constant_from(vec![batch.len(), self.action_dim], a)?;
        let q1 = critic_forward(&self.target1, &mut tape, z, av)?;
        let q2 = critic_forward(&self.target2, &mut tape, z, av)?;
        let (q1, q2) = (tape.value(q1), tape.value(q2));
        Ok((0..batch.len())
            .map(|i| batch.reward[i] + batch.discount[i] * q1[i].min(q2[i]))
            .collect())
    }

    /// One critic step on an n-step batch. Returns the stats and the
    /// (augmented) latent of `batch.obs`, detached, for the actor step.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, stddev: f64, rng: &mut R) -> Result<(CriticStats, Tensor)> {
        self.check_obs(batch.obs.numel(), batch.len())?;
        let obs = self.augment(&batch.obs, rng)?;
        let next_obs = self.augment(&batch.next_obs, rng)?;
        let next_z = self.encode(&next_obs)?;
        let y = self.td_targets(batch, &next_z, stddev, rng)?;

        let b = batch.len();
        let mut tape = Tape::new();
        let x = tape.constant(&obs);
        let z = self.nets.encoder.forward(&mut tape, x)?;
        let a = tape.constant(&batch.action);
        let yv = tape.constant_from(vec![b, 1], y.clone())?;
        let q1 = critic_forward(&self.nets.critic1, &mut tape, z, a)?;
        let q2 = critic_forward(&self.nets.critic2, &mut tape, z, a)?;
        let d1 = tape.sub(q1, yv)?;
        let d2 = tape.sub(q2, yv)?;
        let s1 = tape.mul(d1, d1)?;
        let s2 = tape.mul(d2, d2)?;
        let l1 = tape.mean(s1)?;
        let l2 = tape.mean(s2)?;
        let loss = tape.add(l1, l2)?;
        let grads = tape.backward(loss)?;
        accumulate(&grads, &mut self.nets.encoder)?;
        accumulate(&grads, &mut self.nets.critic1)?;
        accumulate(&grads, &mut self.nets.critic2)?;
        self.critic_opt.step(&mut self.nets.encoder, ENCODER);
        self.critic_opt.step(&mut self.nets.critic1, CRITIC1);
        self.critic_opt.step(&mut self.nets.critic2, CRITIC2);

        let stats = CriticStats {
            critic_loss: tape.value(loss)[0],
            q1_mean: tape.value(q1).iter().sum::<f64>() / b as f64,
            target_mean: y.iter().sum::<f64>() / b as f64,
        };
        Ok((stats, tape.to_tensor(z)))
    }

    /// `−mean Q₁(z, π(z)) + λ·Σ p̄ log p̄` on a tape; `z` enters as a constant.
    pub fn actor_loss_on_tape(&self, tape: &mut Tape, z: &Tensor, lb_weight: f64) -> Result<ActorLoss> {
        let zv = tape.constant(z);
        let forward = self.nets.actor.forward(tape, zv)?;
        let q = critic_forward(&self.nets.critic1, tape, zv, forward.action)?;
        let qm = tape.mean(q)?;
        let q_term = tape.scale(qm, -1.0)?;
        let (total, lb_term) = match forward.full_probs {
            Some(p) if lb_weight != 0.0 => {
                let lb = load_balance_loss_tape(tape, p)?;
                let weighted = tape.scale(lb, lb_weight)?;
                (tape.add(q_term, weighted)?, Some(lb))
            }
            Some(p) => (q_term, Some(load_balance_loss_tape(tape, p)?)),
            None => (q_term, None),
        };
        Ok(ActorLoss { total, q_term, lb_term, forward })
    }

    /// One actor step on detached latents.
    pub fn actor_update(&mut self, z: &Tensor) -> Result<ActorStats> {
        let mut tape = Tape::new();
        let loss = self.actor_loss_on_tape(&mut tape, z, self.cfg.lb_weight)?;
        let grads = tape.backward(loss.total)?;
        accumulate(&grads, &mut self.nets.actor)?;
        self.actor_opt.step(&mut self.nets.actor, ACTOR);
        Ok(ActorStats {
            actor_loss: tape.value(loss.total)[0],
            lb_loss: loss.lb_term.map(|v| tape.value(v)[0]),
        })
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        let r = self.cfg.soft_update_rate;
        soft_update(&self.nets.critic1, &mut self.target1, r)?;
        soft_update(&self.nets.critic2, &mut self.target2, r)
    }

    /// Critic step, actor step and target update on one batch.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, stddev: f64, rng: &mut R) -> Result<(CriticStats, ActorStats)> {
        let (c, z) = self.critic_update(batch, stddev, rng)?;
        let a = self.actor_update(&z)?;
        self.soft_update_targets()?;
        Ok((c, a))
    }

    /// Gradient of the task part of the actor loss, `−mean Q`, (or of the
    /// critic-1 regression loss) with respect to the actor trunk, flattened in
    /// visiting order. The load-balancing term is left out.
    pub fn trunk_gradient(&self, batch: &Batch, loss: GradLoss, stddev: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let z = self.encode(&batch.obs)?;
        let mut tape = Tape::new();
        let grads = match loss {
            GradLoss::Actor => {
                let l = self.actor_loss_on_tape(&mut tape, &z, 0.0)?;
                tape.backward(l.q_term)?
            }
            GradLoss::Critic => {
                let next_z = self.encode(&batch.next_obs)?;
                let y = self.td_targets(batch, &next_z, stddev, rng)?;
                let zv = tape.constant(&z);
                let f = self.nets.actor.forward(&mut tape, zv)?;
                let q = critic_forward(&self.nets.critic1, &mut tape, zv, f.action)?;
                let yv = tape.constant_from(vec![batch.len(), 1], y)?;
                let d = tape.sub(q, yv)?;
                let s = tape.mul(d, d)?;
                let l = tape.mean(s)?;
                tape.backward(l)?
            }
        };
        let mut out = Vec::new();
        self.nets.actor.trunk.visit("", &mut |_, t| match grads.of_param(t) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat_n(0.0, t.numel())),
        });
        Ok(out)
    }

    /// Hidden activations counted by the dormant ratio on a probe batch.
    pub fn dormant_report(&self, probe_obs: &Tensor, tau: f64, include_encoder: bool) -> Result<DormantReport> {
        let z = self.encode(probe_obs)?;
        let mut layers = match &self.nets.actor.trunk {
            Trunk::Moe(m) => m.hidden_activations(&z)?,
            Trunk::Mlp(m) => m.hidden_activations(&z)?,
        };
        if include_encoder {
            layers.insert(0, ("encoder".to_string(), z));
        }
        dormant_report(&layers, tau)
    }

    /// Routing decisions of the MoE trunk on a batch of observations.
    pub fn route_batch(&self, obs: &Tensor) -> Result<Vec<GateResult>> {
        let Trunk::Moe(m) = &self.nets.actor.trunk else {
            return Err(Error::Unsupported("routing requested from an MLP trunk".into()));
        };
        let z = self.encode(obs)?;
        let mut tape = Tape::new();
        let zv = tape.constant(&z);
        Ok(m.forward_tape(&mut tape, zv)?.gates)
    }

    /// Forgets optimizer moments for parameters under the given top-level prefixes.
    pub fn reset_optimizer(&mut self, prefixes: &[&str]) {
        self.critic_opt.reset(prefixes);
        self.actor_opt.reset(prefixes);
    }

    pub fn optimizer_state_len(&self) -> usize {
        self.critic_opt.tracked() + self.actor_opt.tracked()
    }

    /// Replaces the critic targets by copies of the online critics.
    pub fn sync_targets(&mut self) -> Result<()> {
        soft_update(&self.nets.critic1, &mut self.target1, 1.0)?;
        soft_update(&self.nets.critic2, &mut self.target2, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradLoss {
    Actor,
    Critic,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(trunk: TrunkKind) -> AgentConfig {
        AgentConfig {
            trunk,
            latent_dim: 8,
            num_experts: 4,
            top_k: 2,
            expert_hidden: 8,
            trunk_out: 8,
            critic_hidden: 16,
            batch_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn mlp_trunk_is_parameter_matched() {
        for cfg in [small(TrunkKind::Mlp), AgentConfig::default()] {
            let moe = cfg.moe_trunk_params() as f64;
            let mlp = cfg.mlp_trunk_params() as f64;
            assert!((mlp - moe).abs() / moe < 0.1, "{mlp} vs {moe}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = small(TrunkKind::Mlp);
        let nets = Networks::new(&cfg, ObsShape::Vector(5), 2, &mut rng).unwrap();
        assert_eq!(nets.actor.trunk.param_count(), cfg.mlp_trunk_params());
    }

    #[test]
    fn actions_are_bounded_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agent = Agent::new(small(TrunkKind::Moe), ObsShape::Vector(5), 3, &mut rng).unwrap();
        let sched = ExplorationSchedule::new(1.0, 0.1, 1000);
        let obs = [10.0, -3.0, 0.5, 2.0, 7.0];
        let a = agent.act(&obs, 0, false, &sched, &mut rng).unwrap();
        assert_eq!(a, agent.act(&obs, 0, false, &sched, &mut rng).unwrap());
        for _ in 0..100 {
            let e = agent.act(&obs, 0, true, &sched, &mut rng).unwrap();
            for (x, y) in e.iter().zip(&a) {
                assert!(x.abs() <= 1.0);
                assert!((x - y).abs() <= 0.3 + 1e-12);
            }
        }
        assert!(matches!(agent.policy(&[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn soft_update_extremes_and_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let online = Mlp::new(&[3, 4, 1], &mut rng);
        let start = Mlp::new(&[3, 4, 1], &mut rng);
        let mut t = start.clone();
        soft_update(&online, &mut t, 0.0).unwrap();
        assert_eq!(flat_params(&t), flat_params(&start));
        soft_update(&online, &mut t, 1.0).unwrap();
        assert_eq!(flat_params(&t), flat_params(&online));

        let mut t = start.clone();
        let n = 50;
        for _ in 0..n {
            soft_update(&online, &mut t, 0.01).unwrap();
        }
        let keep = 0.99f64.powi(n);
        for ((x, o), s) in flat_params(&t).concat().iter().zip(flat_params(&online).concat()).zip(flat_params(&start).concat()) {
            assert!((x - (o + keep * (s - o))).abs() < 1e-12);
        }
        let wrong = Mlp::new(&[3, 5, 1], &mut rng);
        assert!(soft_update(&online, &mut wrong.clone(), 0.5).is_err());
    }

    #[test]
    fn mlp_trunk_has_no_balance_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let agent = Agent::new(small(TrunkKind::Mlp), ObsShape::Vector(5), 2, &mut rng).unwrap();
        let z = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let l = agent.actor_loss_on_tape(&mut tape, &z, 0.002).unwrap();
        assert!(l.lb_term.is_none());
        assert_eq!(tape.value(l.total), tape.value(l.q_term));
    }

    #[test]
    fn zero_balance_weight_gives_plain_dpg_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agent = Agent::new(small(TrunkKind::Moe), ObsShape::Vector(5), 2, &mut rng).unwrap();
        let z = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.21).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let l = agent.actor_loss_on_tape(&mut tape, &z, 0.0).unwrap();
        assert_eq!(tape.value(l.total), tape.value(l.q_term));
        assert!(l.lb_term.is_some());
    }

    #[test]
    fn image_encoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = ObsShape::Image { c: 3, h: 24, w: 24 };
        let agent = Agent::new(small(TrunkKind::Moe), shape, 2, &mut rng).unwrap();
        let obs = Tensor::new(vec![2, 3 * 24 * 24], vec![0.1; 2 * 3 * 24 * 24]).unwrap();
        assert_eq!(agent.encode(&obs).unwrap().shape(), &[2, 8]);
        let a = agent.policy(&vec![0.2; 3 * 24 * 24]).unwrap();
        assert_eq!(a.len(), 2);
    }
}
