mod common;

use moerl_core::analysis::eval_candidates;
use moerl_core::autodiff::Module;
use moerl_core::envs::EnvSpec;
use moerl_core::harness::{Preset, RunConfig};
use moerl_core::moe::MoeLayer;
use moerl_core::perturb::CandidateSource;
use moerl_core::rlcore::checkpoint::{read_from, write_to};
use moerl_core::rlcore::metrics::of_kind;
use moerl_core::rlcore::{evaluate, train, AgentConfig, MetricsLog, PerturbMode, TrainConfig, TrunkKind};
use serde_json::Value;

fn small(env: &str, frames: u64) -> TrainConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.env = env.into();
    cfg.total_frames = frames;
    cfg.seed_frames = 400;
    cfg.exploration_steps = 200;
    cfg.perturb_interval_frames = 600;
    cfg.eval_every_frames = 1000;
    cfg.eval_episodes = 2;
    cfg.candidate_eval_episodes = 1;
    cfg.snapshot_every_frames = 500;
    cfg.batch_size = 16;
    cfg.train_config().unwrap()
}

fn run_log(cfg: &TrainConfig) -> Vec<Value> {
    let mut log = MetricsLog::in_memory();
    train(cfg, &mut log).unwrap();
    log.into_records()
}

#[test]
fn same_config_same_metrics() {
    for env in ["sparse_goal", "opposing:k=4", "multistage:image=16x16"] {
        let cfg = small(env, 1500);
        let a = serde_json::to_string(&run_log(&cfg)).unwrap();
        let b = serde_json::to_string(&run_log(&cfg)).unwrap();
        assert_eq!(a, b, "{env}");
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(a, serde_json::to_string(&run_log(&other)).unwrap(), "{env}");
    }
}

#[test]
fn zero_frames_logs_only_the_header() {
    let log = run_log(&small("sparse_goal", 0));
    assert_eq!(log.len(), 1);
    assert_eq!(log[0]["kind"], "header");
    assert_eq!(log[0]["config"]["total_frames"], 0);
}

#[test]
fn records_are_ordered() {
    let log = run_log(&small("opposing:k=2", 2000));
    for w in log.windows(2) {
        assert!(w[1]["seq"].as_u64() > w[0]["seq"].as_u64());
        assert!(w[1]["frame"].as_u64() >= w[0]["frame"].as_u64());
    }
    let snap = of_kind(&log, "snapshot").last().unwrap();
    for key in ["stddev", "beta", "critic_loss", "actor_loss", "lb_loss", "usage_entropy"] {
        assert!(snap[key].is_number(), "snapshot lacks {key}");
    }
    let usage: Vec<f64> = serde_json::from_value(snap["usage"].clone()).unwrap();
    assert!((usage.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn perturbations_follow_the_interval() {
    let cfg = small("sparse_goal", 4000);
    let log = run_log(&cfg);
    let frames: Vec<u64> = of_kind(&log, "perturb").map(|r| r["frame"].as_u64().unwrap()).collect();
    let t = cfg.perturb.interval_frames;
    let slack = cfg.env.episode_len as u64;
    assert!(!frames.is_empty());
    let mut last_multiple = 0;
    for f in &frames {
        let m = f / t;
        assert!(m > last_multiple, "two perturbations within one interval at {f}");
        assert!(f - m * t <= slack, "perturbation at {f} long after {}", m * t);
        last_multiple = m;
    }
    assert!(frames.len() as u64 >= cfg.total_frames / t - 1);
    for r in of_kind(&log, "perturb") {
        let a = r["alpha"].as_f64().unwrap();
        assert!((cfg.perturb.alpha_min..=cfg.perturb.alpha_max).contains(&a));
        assert!(r["candidate"]["mean_return"].is_number());
    }
}

#[test]
fn perturb_modes() {
    let mut cfg = small("sparse_goal", 2500);
    cfg.perturb_mode = PerturbMode::Off;
    let log = run_log(&cfg);
    assert_eq!(of_kind(&log, "perturb").count(), 0);
    assert!(of_kind(&log, "episode").all(|r| r["top_inserted"] == false));
    cfg.perturb_mode = PerturbMode::Random;
    let log = run_log(&cfg);
    assert!(of_kind(&log, "perturb").count() > 0);
    assert!(of_kind(&log, "perturb").all(|r| r["source"] == "random"));
    cfg.perturb_mode = PerturbMode::Oriented;
    let log = run_log(&cfg);
    assert!(of_kind(&log, "perturb").all(|r| r["source"] == "oriented"));
}

#[test]
fn conflict_measurements_cover_every_task() {
    let mut cfg = small("opposing:k=4", 2000);
    cfg.conflict_every_frames = 500;
    cfg.conflict_batch = 16;
    let log = run_log(&cfg);
    let recs: Vec<&Value> = of_kind(&log, "conflict").collect();
    assert!(!recs.is_empty());
    for r in &recs {
        assert!(r["groups"].as_array().unwrap().len() >= 2);
        assert_eq!(r["params"], "actor.trunk");
    }
    assert_eq!(recs.last().unwrap()["groups"], serde_json::json!([0, 1, 2, 3]));
}

#[test]
fn candidate_evaluation_leaves_agent_untouched() {
    let cfg = small("sparse_goal", 2000);
    let mut log = MetricsLog::in_memory();
    let out = train(&cfg, &mut log).unwrap();
    let before = out.agent.clone();
    for src in [CandidateSource::Oriented, CandidateSource::Random] {
        let c = eval_candidates(&out.agent, &out.top_agents, src, &cfg.env, 3, 2, 5, cfg.action_repeat).unwrap();
        assert_eq!(c.len(), 3);
    }
    let mut a = Vec::new();
    before.nets.visit("", &mut |_, t| a.extend_from_slice(t.data()));
    let mut b = Vec::new();
    out.agent.nets.visit("", &mut |_, t| b.extend_from_slice(t.data()));
    assert_eq!(a, b);
    assert_eq!(before.optimizer_state_len(), out.agent.optimizer_state_len());
}

#[test]
fn checkpoint_after_training_reproduces_evaluation() {
    let cfg = small("opposing:k=2", 1500);
    let mut log = MetricsLog::in_memory();
    let out = train(&cfg, &mut log).unwrap();
    let mut bytes = Vec::new();
    write_to(&mut bytes, &out.agent, &out.top_agents, &cfg.env.to_string()).unwrap();
    let ck = read_from(&mut bytes.as_slice()).unwrap();
    let spec = EnvSpec::parse(&ck.arch.env).unwrap();
    let a = evaluate(&out.agent, &spec, 3, 7, 2).unwrap();
    let b = evaluate(&ck.agent, &spec, 3, 7, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(ck.top_agents.rewards(), out.top_agents.rewards());
}

#[test]
fn mlp_trunk_matches_moe_parameter_count() {
    for (latent, hidden, out) in [(50, 256, 1024), (32, 32, 32), (100, 256, 1024), (8, 4, 6)] {
        let cfg = AgentConfig { latent_dim: latent, expert_hidden: hidden, trunk_out: out, ..Default::default() };
        let moe = MoeLayer::param_count_for(latent, hidden, out, cfg.num_experts);
        let mlp = AgentConfig { trunk: TrunkKind::Mlp, ..cfg.clone() }.mlp_trunk_params();
        let rel = (mlp as f64 - moe as f64).abs() / moe as f64;
        assert!(rel <= 0.10, "{latent}/{hidden}/{out}: mlp {mlp} vs moe {moe}");
    }
}
