"""Smoke test for the moerl extension module.

Build and install first:  maturin develop --release -m crates/python/Cargo.toml
"""

import math
import sys
import tempfile
from pathlib import Path

import moerl


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    env = moerl.Env("opposing:k=4", seed=3)
    obs = env.reset()
    check(len(obs) == env.obs_size == 5, "opposing obs has slider plus one-hot task")
    step = env.step(env.reference_action())
    check(math.isfinite(step["reward"]) and "obs" in step, "env step returns a finite reward")

    layer = moerl.MoeLayer(6, 8, 3, num_experts=4, k=2, seed=1)
    z = [0.1, -0.2, 0.3, 0.0, 0.5, -0.4]
    route = layer.route(z)
    check(len(route["indices"]) == 2, "router selects top-2 experts")
    check(abs(sum(route["weights"]) - 1.0) < 1e-12, "gate weights sum to one")
    check(len(layer.forward(z)) == 3, "moe forward has output width 3")

    check(moerl.perturb_factor(0.0) == 0.9 and moerl.perturb_factor(1.0) == 0.2, "perturb factor clips")
    check(moerl.apply_perturbation([1.0, 2.0], [3.0, 4.0], 0.5) == [2.0, 3.0], "perturbation interpolates")
    n = 4
    check(abs(moerl.load_balance_loss([[1.0 / n] * n]) + math.log(n)) < 1e-12, "uniform routing gives -log N")
    check(moerl.dormant_ratio([[[0.0, 1.0], [0.0, 1.0]]], 0.1) == 0.5, "one of two neurons is dormant")
    cos = moerl.gradient_cosine([[1.0, 0.0], [-1.0, 0.0]])
    check(cos[0][1] == -1.0, "opposite gradients have cosine -1")

    rep = moerl.efficiency([("std", [(0, 0.0), (600, 1.0)]), ("ours", [(0, 0.0), (370, 1.0)])], 1.0)
    ratios = {m["name"]: m["ratio"] for m in rep["methods"]}
    check(abs(ratios["ours"] - 370 / 600) < 1e-12 and ratios["std"] == 1.0, "normalised sample efficiency")

    with tempfile.TemporaryDirectory() as tmp:
        cfg = moerl.RunConfig(env="opposing:k=2", total_frames=600, seed_frames=200,
                              eval_every_frames=300, eval_episodes=2, out_dir=str(Path(tmp) / "run"))
        run_dir, meta = cfg.train()
        check(meta["status"] == "completed", "training run completes")
        records = moerl.read_metrics(str(Path(run_dir) / "metrics.jsonl"))
        check(records[0]["kind"] == "header", "metrics start with a header")
        agent = moerl.Agent.load(run_dir)
        res = agent.evaluate(episodes=2, seed=5)
        check(0.0 <= res["success_rate"] <= 1.0, "checkpoint evaluates")
        check(moerl.RunConfig(str(Path(run_dir) / "config.toml")).echo() == cfg.echo().replace(
            f'out_dir = "{Path(tmp) / "run"}"', f'out_dir = "{run_dir}"'), "config echo round-trips")
    print("smoke test passed")


if __name__ == "__main__":
    main()
