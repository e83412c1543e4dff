//! Noise-free evaluation rollouts.

use serde::{Deserialize, Serialize};

use super::agent::Agent;
use crate::envs::{Env, EnvSpec};
use crate::error::{contract_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
    pub tasks: Vec<usize>,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
}

impl EvalResult {
    fn from_episodes(returns: Vec<f64>, successes: Vec<bool>, tasks: Vec<usize>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let success_rate = successes.iter().filter(|&&s| s).count() as f64 / n;
        Self {
            mean_return: mean,
            std_return: var.sqrt(),
            success_rate,
            returns,
            successes,
            tasks,
        }
    }
}

/// Routing decision taken at one evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub task: usize,
    pub stage: usize,
    /// Agent step within the episode.
    pub t: usize,
    /// Dense gate weights over all experts (zero outside the top-k).
    pub gates: Vec<f64>,
}

/// Runs `episodes` deterministic episodes. Multi-task suites without a fixed
/// task cycle through the tasks in order.
pub fn evaluate(agent: &Agent, spec: &EnvSpec, episodes: usize, seed: u64, action_repeat: usize) -> Result<EvalResult> {
    Ok(evaluate_with_routes(agent, spec, episodes, seed, action_repeat, false)?.0)
}

pub fn evaluate_with_routes(
    agent: &Agent,
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    action_repeat: usize,
    record_routes: bool,
) -> Result<(EvalResult, Vec<RouteRecord>)> {
    if spec.obs_shape() != agent.obs_shape() || spec.action_dim() != agent.action_dim() {
        return contract_err(format!("environment {spec} does not fit the agent architecture"));
    }
    let mut env = Env::make(spec.clone(), seed);
    let cycle = spec.task_id.is_none() && spec.num_tasks() > 1;
    let (mut returns, mut successes, mut tasks, mut routes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for e in 0..episodes {
        if cycle {
            env.set_task(Some(e % spec.num_tasks()))?;
        }
        let mut obs = env.reset();
        let (mut ret, mut success, mut t) = (0.0, false, 0);
        'episode: loop {
            let (action, gate) = agent.policy_with_gates(&obs)?;
            if record_routes {
                if let Some(g) = gate {
                    routes.push(RouteRecord {
                        task: env.task_id(),
                        stage: env.stage_index(),
                        t,
                        gates: g.dense_weights(),
                    });
                }
            }
            t += 1;
            for _ in 0..action_repeat.max(1) {
                let r = env.step(&action)?;
                ret += r.reward;
                success |= r.info.success;
                obs = r.obs;
                if r.done {
                    break 'episode;
                }
            }
        }
        returns.push(ret);
        successes.push(success);
        tasks.push(env.task_id());
    }
    Ok((EvalResult::from_episodes(returns, successes, tasks), routes))
}
