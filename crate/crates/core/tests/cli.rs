use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_moerl");

fn moerl(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env("MOERL_OUT", dir.join("out")).output().unwrap()
}

const QUICK: &[&str] = &[
    "--set", "total_frames=1200",
    "--set", "seed_frames=300",
    "--set", "exploration_steps=100",
    "--set", "batch_size=16",
    "--set", "perturb_interval_frames=400",
    "--set", "eval_every_frames=600",
    "--set", "eval_episodes=2",
    "--set", "candidate_eval_episodes=1",
    "--set", "snapshot_every_frames=300",
];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(extra);
    args.extend_from_slice(QUICK);
    moerl(dir, &args)
}

#[test]
fn train_writes_a_self_describing_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = train(d, &["--env", "sparse_goal", "--trunk", "moe", "--perturb", "oriented", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = d.join("out/sparse_goal_moe_oriented_s1");
    for f in ["config.toml", "metrics.jsonl", "checkpoint.bin", "run_meta.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let meta: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(meta["status"], "completed");

    // Re-running from the config echo alone reproduces the metrics.
    let again = moerl(d, &["train", "--config", run.join("config.toml").to_str().unwrap(), "--out", "again"]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    let a = std::fs::read(run.join("metrics.jsonl")).unwrap();
    let b = std::fs::read(d.join("again/metrics.jsonl")).unwrap();
    assert_eq!(a, b);
    let echo_a = std::fs::read_to_string(run.join("config.toml")).unwrap();
    let echo_b = std::fs::read_to_string(d.join("again/config.toml")).unwrap();
    assert_eq!(echo_a.replace(run.to_str().unwrap(), "X"), echo_b.replace("again", "X"));

    let ev = moerl(d, &["eval", run.to_str().unwrap(), "--episodes", "2"]);
    assert!(ev.status.success());
    let ev: serde_json::Value = serde_json::from_slice(&ev.stdout).unwrap();
    assert_eq!(ev["result"]["returns"].as_array().unwrap().len(), 2);

    for fig in ["dormant", "candidate", "usage", "learning"] {
        let p = moerl(d, &["plot", fig, run.to_str().unwrap(), "--out", "figs"]);
        assert!(p.status.success(), "{fig}: {}", String::from_utf8_lossy(&p.stderr));
    }
    let svg = std::fs::read_to_string(d.join("figs/dormant.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(d.join("figs/usage_task.csv").exists());
    let p = moerl(d, &["plot", "conflict", run.to_str().unwrap()]);
    assert!(!p.status.success());
    assert!(String::from_utf8_lossy(&p.stderr).contains("conflict"));

    let c = moerl(d, &["analyze", "candidates", run.to_str().unwrap(), "--n", "2", "--episodes", "1"]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    let u = moerl(d, &["analyze", "usage", run.to_str().unwrap()]);
    assert!(u.status.success());
}

#[test]
fn bad_configs_fail_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.toml"), "env = \"sparse_goal\"\nlearning_rate = 0.1\n").unwrap();
    let out = moerl(d, &["train", "--config", "c.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = moerl(d, &["train", "--env", "moon_base"]);
    assert_eq!(out.status.code(), Some(2));
    let out = moerl(d, &["train", "--set", "top_k=7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("out").exists(), "invalid configs must not create run directories");
}

#[test]
fn dry_run_prints_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = moerl(tmp.path(), &["train", "--preset", "paper", "--trunk", "mlp", "--dry-run"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("preset = \"paper\""));
    assert!(text.contains("trunk = \"mlp\""));
    assert!(text.contains("critic_hidden = 1024"));
}

#[test]
fn ablation_runs_all_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut args = vec!["ablate", "--env", "opposing:k=2", "--seeds", "1,2", "--out", "abl", "--threshold", "0.5"];
    args.extend_from_slice(QUICK);
    let out = Command::new(BIN).args(&args).current_dir(d).env("MOERL_THREADS", "2").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for v in ["MENTOR", "MENTOR_wo_TP", "MENTOR_wo_MoE", "MENTOR_wo_TP_MoE"] {
        for s in [1, 2] {
            assert!(d.join(format!("abl/{v}/seed{s}/metrics.jsonl")).exists(), "{v} seed {s}");
        }
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("abl/ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["efficiency"]["methods"].as_array().unwrap().iter().map(|m| m["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["MENTOR", "MENTOR_w/o_TP", "MENTOR_w/o_MoE", "MENTOR_w/o_TP_MoE"]);
    let plain = std::fs::read_to_string(d.join("abl/MENTOR_wo_TP_MoE/seed1/metrics.jsonl")).unwrap();
    assert!(!plain.contains("\"kind\":\"perturb\""));
    let csv = std::fs::read_to_string(d.join("abl/efficiency.csv")).unwrap();
    assert!(csv.starts_with("method,median_time,ratio"));
}
