//! Roll-outs of perturbation candidates loaded into a frozen agent copy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{contract_err, Result};
use crate::perturb::{CandidateSource, TopAgentBuffer, WeightVector};
use crate::rlcore::{evaluate, fresh_weights, perturb_layout, Agent, EvalResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub index: usize,
    pub source: CandidateSource,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    pub returns: Vec<f64>,
}

/// Evaluates `weights` (laid out like the agent's perturbation layout) on a copy of `agent`.
pub fn eval_weights(
    agent: &Agent,
    weights: &WeightVector,
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    action_repeat: usize,
) -> Result<EvalResult> {
    let mut frozen = agent.clone();
    weights.unflatten_into(&mut frozen.nets, "")?;
    evaluate(&frozen, spec, episodes, seed, action_repeat)
}

/// Samples `n` candidates from `source` and evaluates each without exploration
/// noise. Every candidate sees the same evaluation episodes.
#[allow(clippy::too_many_arguments)]
pub fn eval_candidates(
    agent: &Agent,
    top: &TopAgentBuffer,
    source: CandidateSource,
    spec: &EnvSpec,
    n: usize,
    episodes: usize,
    seed: u64,
    action_repeat: usize,
) -> Result<Vec<CandidateEval>> {
    if spec.obs_shape() != agent.obs_shape() || spec.action_dim() != agent.action_dim() {
        return contract_err(format!("environment {spec} does not fit the agent architecture"));
    }
    let layout = perturb_layout(agent);
    let dist = match source {
        CandidateSource::Oriented => match top.oriented_distribution() {
            Some(d) => Some(d),
            None => return contract_err("oriented candidates requested from an empty top-agent buffer"),
        },
        CandidateSource::Random => None,
    };
    if let Some(d) = &dist {
        if d.mean.layout().as_ref() != layout.as_ref() {
            return contract_err("top-agent weights do not match the agent architecture");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval_seed = seed ^ 0x5EED_0F_CA4D;
    (0..n)
        .map(|index| {
            let phi = match &dist {
                Some(d) => d.sample(&mut rng),
                None => fresh_weights(agent, &layout, &mut rng)?,
            };
            let r = eval_weights(agent, &phi, spec, episodes, eval_seed, action_repeat)?;
            Ok(CandidateEval {
                index,
                source,
                mean_return: r.mean_return,
                std_return: r.std_return,
                success_rate: r.success_rate,
                returns: r.returns,
            })
        })
        .collect()
}
