//! Actor-critic learner with a switchable MoE/MLP actor trunk, twin critics,
//! n-step replay, scheduled exploration and the perturbation hook.

pub mod agent;
pub mod checkpoint;
pub mod eval;
pub mod metrics;
pub mod replay;
pub mod schedule;
pub mod train;

pub use agent::{
    critic_forward, soft_update, Actor, ActorLoss, ActorStats, Agent, AgentConfig, CriticStats, Encoder, GradLoss,
    Networks, Trunk, TrunkKind,
};
pub use checkpoint::{read_checkpoint, write_checkpoint, ArchDescriptor, Checkpoint};
pub use eval::{evaluate, evaluate_with_routes, EvalResult, RouteRecord};
pub use metrics::{read_metrics, MetricsLog};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use schedule::ExplorationSchedule;
pub use train::{eval_seed, fresh_weights, initial_agent, perturb_layout, train, PerturbMode, TrainConfig, TrainOutcome};
