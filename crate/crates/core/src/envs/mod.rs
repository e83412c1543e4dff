//! Seeded toy control tasks with vector or rendered-image observations.
//!
//! * `opposing:k=K` — 1-D slider `p ∈ [-1, 1]`, `p ← clamp(p + g_i·a)`.
//!   Even task ids "open" (target `+1`), odd ids "close" (target `−1`);
//!   the gain is `g_i = 0.1 / (1 + 0.5·⌊i/2⌋)`. Reward `−|p − target|` per
//!   step, plus [`SUCCESS_BONUS`] and termination once `|p − target| < 0.05`.
//!   The task id is appended to the observation as a one-hot.
//! * `multistage` — 2-D point `p ← clamp(p + 0.1·a_xy)`, third action dim is
//!   the gripper. Gripping (`a_2 > 0`) within 0.1 of the object grasps it,
//!   a grasped object follows the agent, opening (`a_2 < 0`) releases it.
//!   Releasing within 0.1 of the goal succeeds. Reward is `−|p − o|` before
//!   the grasp and `1 − |o − g|` while carrying. Stages: grasp, move
//!   (carrying, `|o − g| ≥ 0.3`), assemble (`0.1 ≤ |o − g| < 0.3`),
//!   release (`|o − g| < 0.1`).
//! * `sparse_goal` — 2-D point mass `v ← 0.8·v + 0.05·a`, `p ← p + v` with
//!   walls that zero the normal velocity. Reward is 0 except
//!   [`SPARSE_SUCCESS_REWARD`] on success: coming to rest (`|v| < 0.05`)
//!   inside the goal radius `|p − g| < 0.15`. Static friction ignores
//!   actions with norm below [`SPARSE_STATIC_FRICTION`], so a policy that
//!   only emits small actions never leaves its start.
//!
//! Every task starts from uniformly random positions. With `disturb`, the
//! goal (target position for `multistage` and `sparse_goal`) teleports once
//! at a uniform step in `[len/4, len/2)`.

mod render;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
pub use render::{channel_mass, decode_centroid, pixel_to_world, render, world_to_pixel, CHANNELS};

pub const SUCCESS_BONUS: f64 = 10.0;
pub const SPARSE_SUCCESS_REWARD: f64 = 1.0;
pub const OPPOSING_SUCCESS_RADIUS: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.1;
pub const PLACE_RADIUS: f64 = 0.1;
pub const ASSEMBLE_RADIUS: f64 = 0.3;
pub const SPARSE_GOAL_RADIUS: f64 = 0.15;
pub const SPARSE_MAX_SPEED: f64 = 0.05;
pub const SPARSE_STATIC_FRICTION: f64 = 0.25;
/// Steps the reference controllers need to finish from any state reached
/// by idling, so a disturbance leaves the task solvable when at least this
/// many steps remain (true for the default episode lengths).
pub const DISTURBANCE_MIN_REMAINING: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Opposing { k: usize },
    MultiStage,
    SparseGoal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    Vector,
    Image { h: usize, w: usize },
}

/// Observation layout as seen by an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsShape {
    Vector(usize),
    Image { c: usize, h: usize, w: usize },
}

impl ObsShape {
    pub fn numel(&self) -> usize {
        match *self {
            ObsShape::Vector(d) => d,
            ObsShape::Image { c, h, w } => c * h * w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub obs_mode: ObsMode,
    pub episode_len: usize,
    /// Fixes the task of a multi-task suite; `None` samples one per episode.
    pub task_id: Option<usize>,
    pub disturbance: bool,
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        let episode_len = match kind {
            EnvKind::Opposing { .. } => 100,
            EnvKind::MultiStage => 150,
            EnvKind::SparseGoal => 100,
        };
        Self {
            kind,
            obs_mode: ObsMode::Vector,
            episode_len,
            task_id: None,
            disturbance: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EnvKind::Opposing { .. } => "opposing",
            EnvKind::MultiStage => "multistage",
            EnvKind::SparseGoal => "sparse_goal",
        }
    }

    /// Parses `name[:opt]*`, e.g. `opposing:k=5`, `multistage:image`,
    /// `sparse_goal:disturb:len=120`, `opposing:k=4:task=1:image=32x32`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default().trim();
        let opts: Vec<&str> = parts.collect();
        let kind = match name {
            "opposing" => {
                let k = opts
                    .iter()
                    .find_map(|o| o.strip_prefix("k="))
                    .map(|v| v.parse::<usize>())
                    .transpose()
                    .map_err(|e| Error::Config(format!("{s}: bad k ({e})")))?
                    .unwrap_or(5);
                if k < 2 {
                    return Err(Error::Config(format!("{s}: opposing needs k >= 2")));
                }
                EnvKind::Opposing { k }
            }
            "multistage" => EnvKind::MultiStage,
            "sparse_goal" => EnvKind::SparseGoal,
            other => return Err(Error::Config(format!("unknown environment `{other}`"))),
        };
        let mut spec = Self::new(kind);
        for opt in opts {
            let (key, val) = opt.split_once('=').unwrap_or((opt, ""));
            let bad = |what: &str| Error::Config(format!("{s}: bad {what} `{val}`"));
            match key {
                "k" if matches!(kind, EnvKind::Opposing { .. }) => {}
                "image" => {
                    let (h, w) = if val.is_empty() {
                        (24, 24)
                    } else {
                        let (h, w) = val.split_once('x').ok_or_else(|| bad("image size"))?;
                        (h.parse().map_err(|_| bad("image size"))?, w.parse().map_err(|_| bad("image size"))?)
                    };
                    if h < 8 || w < 8 {
                        return Err(bad("image size"));
                    }
                    spec.obs_mode = ObsMode::Image { h, w };
                }
                "vector" => spec.obs_mode = ObsMode::Vector,
                "disturb" => spec.disturbance = true,
                "len" => {
                    spec.episode_len = val.parse().map_err(|_| bad("len"))?;
                    if spec.episode_len == 0 {
                        return Err(bad("len"));
                    }
                }
                "task" => {
                    let t: usize = val.parse().map_err(|_| bad("task"))?;
                    match kind {
                        EnvKind::Opposing { k } if t < k => spec.task_id = Some(t),
                        _ => return Err(bad("task")),
                    }
                }
                _ => return Err(Error::Config(format!("{s}: unknown option `{opt}`"))),
            }
        }
        Ok(spec)
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::Opposing { .. } => 1,
            EnvKind::MultiStage => 3,
            EnvKind::SparseGoal => 2,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::Opposing { k } => 1 + k,
            EnvKind::MultiStage => 7,
            EnvKind::SparseGoal => 6,
        }
    }

    pub fn obs_shape(&self) -> ObsShape {
        match self.obs_mode {
            ObsMode::Vector => ObsShape::Vector(self.state_dim()),
            ObsMode::Image { h, w } => ObsShape::Image { c: CHANNELS, h, w },
        }
    }

    /// Declared stage labels, in index order.
    pub fn stages(&self) -> &'static [&'static str] {
        match self.kind {
            EnvKind::Opposing { .. } => &["reach"],
            EnvKind::MultiStage => &["grasp", "move", "assemble", "release"],
            EnvKind::SparseGoal => &["search"],
        }
    }

    /// Number of tasks in the suite (1 for single-task envs).
    pub fn num_tasks(&self) -> usize {
        match self.kind {
            EnvKind::Opposing { k } => k,
            _ => 1,
        }
    }

    /// Lowest achievable undiscounted return when it is known in closed form.
    pub fn floor_return(&self) -> Option<f64> {
        matches!(self.kind, EnvKind::SparseGoal).then_some(0.0)
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())?;
        if let EnvKind::Opposing { k } = self.kind {
            write!(f, ":k={k}")?;
        }
        if let Some(t) = self.task_id {
            write!(f, ":task={t}")?;
        }
        if let ObsMode::Image { h, w } = self.obs_mode {
            write!(f, ":image={h}x{w}")?;
        }
        if self.disturbance {
            write!(f, ":disturb")?;
        }
        if self.episode_len != EnvSpec::new(self.kind).episode_len {
            write!(f, ":len={}", self.episode_len)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub stage: &'static str,
    pub stage_index: usize,
    pub success: bool,
    pub task_id: usize,
    /// The submitted action left `[-1, 1]` and was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode over, by success or time limit.
    pub done: bool,
    /// Episode over by success (no bootstrapping past this step).
    pub terminal: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
enum State {
    Opposing { p: f64, task: usize },
    Multi { p: [f64; 2], obj: [f64; 2], goal: [f64; 2], grasped: bool },
    Sparse { p: [f64; 2], v: [f64; 2], goal: [f64; 2] },
}

#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    rng: ChaCha8Rng,
    state: State,
    t: usize,
    disturb_at: Option<usize>,
    clamp_count: u64,
    done: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn uniform2<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 2] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

pub fn opposing_target(task: usize) -> f64 {
    if task % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

pub fn opposing_gain(task: usize) -> f64 {
    0.1 / (1.0 + 0.5 * (task / 2) as f64)
}

impl Env {
    pub fn make(spec: EnvSpec, seed: u64) -> Self {
        let mut env = Self {
            state: State::Opposing { p: 0.0, task: 0 },
            rng: ChaCha8Rng::seed_from_u64(seed),
            spec,
            t: 0,
            disturb_at: None,
            clamp_count: 0,
            done: true,
        };
        env.reset();
        env
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Fixes (or frees) the task used by subsequent resets.
    pub fn set_task(&mut self, task: Option<usize>) -> Result<()> {
        if let Some(t) = task {
            if t >= self.spec.num_tasks() {
                return Err(Error::Config(format!("task {t} out of range for {}", self.spec)));
            }
        }
        self.spec.task_id = task;
        Ok(())
    }

    /// Group label of the current state: task id, or stage index for staged tasks.
    pub fn group_label(&self) -> usize {
        match self.spec.kind {
            EnvKind::Opposing { .. } => self.task_id(),
            _ => self.stage_index(),
        }
    }

    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        self.done = false;
        self.state = match self.spec.kind {
            EnvKind::Opposing { k } => {
                let task = match self.spec.task_id {
                    Some(t) => t,
                    None => self.rng.random_range(0..k),
                };
                State::Opposing {
                    p: self.rng.random_range(-0.5..0.5),
                    task,
                }
            }
            EnvKind::MultiStage => {
                let p = uniform2(&mut self.rng, -0.9, 0.9);
                let obj = uniform2(&mut self.rng, -0.7, 0.7);
                let mut goal = uniform2(&mut self.rng, -0.7, 0.7);
                while dist(goal, obj) < 0.4 {
                    goal = uniform2(&mut self.rng, -0.7, 0.7);
                }
                State::Multi { p, obj, goal, grasped: false }
            }
            EnvKind::SparseGoal => {
                let goal = uniform2(&mut self.rng, -0.6, 0.6);
                let mut p = uniform2(&mut self.rng, -0.9, 0.9);
                while dist(p, goal) < 0.3 {
                    p = uniform2(&mut self.rng, -0.9, 0.9);
                }
                State::Sparse { p, v: [0.0; 2], goal }
            }
        };
        self.disturb_at = (self.spec.disturbance && !matches!(self.spec.kind, EnvKind::Opposing { .. }))
            .then(|| {
                let lo = self.spec.episode_len / 4;
                let hi = (self.spec.episode_len / 2).max(lo + 1);
                self.rng.random_range(lo..hi)
            });
        self.observe()
    }

    /// Step at which the goal will teleport this episode, if any.
    pub fn disturbance_step(&self) -> Option<usize> {
        self.disturb_at
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    /// Exact state in the layout of the vector observation.
    pub fn state_vector(&self) -> Vec<f64> {
        match &self.state {
            State::Opposing { p, task } => {
                let k = self.spec.num_tasks();
                let mut v = vec![0.0; 1 + k];
                v[0] = *p;
                v[1 + task] = 1.0;
                v
            }
            State::Multi { p, obj, goal, grasped } => {
                vec![p[0], p[1], obj[0], obj[1], goal[0], goal[1], if *grasped { 1.0 } else { 0.0 }]
            }
            State::Sparse { p, v, goal, .. } => vec![p[0], p[1], v[0] * 5.0, v[1] * 5.0, goal[0], goal[1]],
        }
    }

    pub fn observe(&self) -> Vec<f64> {
        match self.spec.obs_mode {
            ObsMode::Vector => self.state_vector(),
            ObsMode::Image { h, w } => render(&self.splats(), h, w),
        }
    }

    /// Image layout: channel 0 agent, channel 1 goal/target, channel 2 the
    /// task marker (opposing), object (multistage, intensity 1 when grasped
    /// and 0.5 otherwise) or velocity scaled ×4 about the centre (sparse_goal).
    fn splats(&self) -> Vec<render::Splat> {
        match &self.state {
            State::Opposing { p, task } => {
                let k = self.spec.num_tasks();
                let tx = -1.0 + 2.0 * *task as f64 / (k - 1) as f64;
                vec![(0, *p, 0.0, 1.0), (1, opposing_target(*task), 0.0, 1.0), (2, tx, -1.0, 1.0)]
            }
            State::Multi { p, obj, goal, grasped } => vec![
                (0, p[0], p[1], 1.0),
                (1, goal[0], goal[1], 1.0),
                (2, obj[0], obj[1], if *grasped { 1.0 } else { 0.5 }),
            ],
            State::Sparse { p, v, goal, .. } => vec![
                (0, p[0], p[1], 1.0),
                (1, goal[0], goal[1], 1.0),
                (2, v[0] * 4.0, v[1] * 4.0, 1.0),
            ],
        }
    }

    pub fn task_id(&self) -> usize {
        match &self.state {
            State::Opposing { task, .. } => *task,
            _ => 0,
        }
    }

    pub fn stage_index(&self) -> usize {
        match &self.state {
            State::Multi { obj, goal, grasped, .. } => {
                let d = dist(*obj, *goal);
                match (*grasped, d) {
                    (false, _) => 0,
                    (true, d) if d >= ASSEMBLE_RADIUS => 1,
                    (true, d) if d >= PLACE_RADIUS => 2,
                    _ => 3,
                }
            }
            _ => 0,
        }
    }

    fn info(&self, success: bool, clamped: bool) -> StepInfo {
        let stage_index = self.stage_index();
        StepInfo {
            stage: self.spec.stages()[stage_index],
            stage_index,
            success,
            task_id: self.task_id(),
            clamped,
        }
    }

    /// Advances one step. Actions outside `[-1, 1]` are clamped and counted.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != self.spec.action_dim() {
            return dim_err(format!(
                "action of length {} for action dim {}",
                action.len(),
                self.spec.action_dim()
            ));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Contract("non-finite action".into()));
        }
        if self.done {
            return Err(Error::Contract("step after episode end; call reset".into()));
        }
        let clamped = action.iter().any(|a| a.abs() > 1.0);
        if clamped {
            self.clamp_count += 1;
        }
        let a: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();

        if self.disturb_at == Some(self.t) {
            let g = uniform2(&mut self.rng, -0.6, 0.6);
            match &mut self.state {
                State::Multi { goal, .. } | State::Sparse { goal, .. } => *goal = g,
                State::Opposing { .. } => {}
            }
        }

        let (reward, success) = match &mut self.state {
            State::Opposing { p, task } => {
                *p = (*p + opposing_gain(*task) * a[0]).clamp(-1.0, 1.0);
                let err = (*p - opposing_target(*task)).abs();
                let success = err < OPPOSING_SUCCESS_RADIUS;
                (-err + if success { SUCCESS_BONUS } else { 0.0 }, success)
            }
            State::Multi { p, obj, goal, grasped } => {
                p[0] = (p[0] + 0.1 * a[0]).clamp(-1.0, 1.0);
                p[1] = (p[1] + 0.1 * a[1]).clamp(-1.0, 1.0);
                let mut success = false;
                if *grasped {
                    *obj = *p;
                    if a[2] < 0.0 {
                        *grasped = false;
                        success = dist(*obj, *goal) < PLACE_RADIUS;
                    }
                } else if a[2] > 0.0 && dist(*p, *obj) < GRASP_RADIUS {
                    *grasped = true;
                    *obj = *p;
                }
                let shaped = if *grasped || success {
                    1.0 - dist(*obj, *goal)
                } else {
                    -dist(*p, *obj)
                };
                (shaped + if success { SUCCESS_BONUS } else { 0.0 }, success)
            }
            State::Sparse { p, v, goal } => {
                let force = if (a[0] * a[0] + a[1] * a[1]).sqrt() < SPARSE_STATIC_FRICTION { [0.0; 2] } else { [a[0], a[1]] };
                for i in 0..2 {
                    v[i] = 0.8 * v[i] + 0.05 * force[i];
                    p[i] += v[i];
                    if p[i].abs() > 1.0 {
                        p[i] = p[i].clamp(-1.0, 1.0);
                        v[i] = 0.0;
                    }
                }
                let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
                let success = dist(*p, *goal) < SPARSE_GOAL_RADIUS && speed < SPARSE_MAX_SPEED;
                (if success { SPARSE_SUCCESS_REWARD } else { 0.0 }, success)
            }
        };
        self.t += 1;
        let terminal = success;
        let done = terminal || self.t >= self.spec.episode_len;
        self.done = done;
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done,
            terminal,
            info: self.info(success, clamped),
        })
    }

    /// Hand-written controller that solves the current state; used as an oracle.
    pub fn reference_action(&self) -> Vec<f64> {
        match &self.state {
            State::Opposing { task, .. } => vec![opposing_target(*task)],
            State::Multi { p, obj, goal, grasped } => {
                let toward = |from: [f64; 2], to: [f64; 2]| {
                    [((to[0] - from[0]) * 10.0).clamp(-1.0, 1.0), ((to[1] - from[1]) * 10.0).clamp(-1.0, 1.0)]
                };
                if !*grasped {
                    let m = toward(*p, *obj);
                    let grip = if dist(*p, *obj) < GRASP_RADIUS * 0.5 { 1.0 } else { -1.0 };
                    vec![m[0], m[1], grip]
                } else if dist(*obj, *goal) < PLACE_RADIUS * 0.5 {
                    vec![0.0, 0.0, -1.0]
                } else {
                    let m = toward(*p, *goal);
                    vec![m[0], m[1], 1.0]
                }
            }
            State::Sparse { p, v, goal, .. } => (0..2)
                .map(|i| (8.0 * (goal[i] - p[i]) - 24.0 * v[i]).clamp(-1.0, 1.0))
                .collect(),
        }
    }
}
