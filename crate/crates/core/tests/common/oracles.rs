//! Reference implementations shared by the property tests and the acceptance run.

use std::sync::Arc;

use moerl_core::autodiff::Mlp;
use moerl_core::dormant::dormant_ratio;
use moerl_core::perturb::{ParamLayout, TopAgentBuffer, WeightVector};
use rand::Rng;

use super::*;

/// Stable sort by reward (earlier entries first on ties), keep the best `cap`.
fn sort_oracle(rewards: &[f64], cap: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rewards.len()).collect();
    idx.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]));
    idx.truncate(cap);
    idx.sort();
    idx
}

pub fn top_agent_stream_agrees(seed: u64) -> bool {
    let mut r = rng(seed);
    let cap = r.random_range(1..12);
    let len = r.random_range(0..60);
    let ties = r.random_bool(0.5);
    let rewards: Vec<f64> = (0..len)
        .map(|_| if ties { r.random_range(0..5) as f64 } else { r.random_range(-10.0..10.0) })
        .collect();
    let layout = Arc::new(ParamLayout::from_entries(vec![("w".into(), vec![1])]));
    let mut buf = TopAgentBuffer::new(cap).unwrap();
    for (i, &rw) in rewards.iter().enumerate() {
        buf.maybe_insert(WeightVector::new(layout.clone(), vec![i as f64]).unwrap(), rw).unwrap();
    }
    let want = sort_oracle(&rewards, cap);
    let mut got_rewards = buf.rewards();
    got_rewards.sort_by(f64::total_cmp);
    let mut want_rewards: Vec<f64> = want.iter().map(|&i| rewards[i]).collect();
    want_rewards.sort_by(f64::total_cmp);
    if got_rewards != want_rewards {
        return false;
    }
    if !ties {
        let mut got: Vec<usize> = buf.entries().iter().map(|e| e.weights.data()[0] as usize).collect();
        got.sort();
        return got == want;
    }
    true
}

/// Builds an MLP with `k` of `m` hidden neurons hard-zeroed and checks that
/// the dormant ratio is exactly `k/m` for several `τ` below the smallest live score.
pub fn crafted_dormant_exact(trial: u64) -> std::result::Result<(), String> {
    let mut r = rng(trial ^ 0xd0);
    let widths = [r.random_range(2..9), r.random_range(2..9)];
    let mut net = Mlp::new(&[3, widths[0], widths[1], 2], &mut rng(trial));
    // Positive inputs, nonnegative weights and unit bias keep live neurons clearly active.
    let mut dead = 0;
    for (l, &w) in widths.iter().enumerate() {
        let k = r.random_range(0..w);
        dead += k;
        let layer = &mut net.layers[l];
        let cols = layer.weight.shape()[1];
        layer.weight.data_mut().iter_mut().for_each(|v| *v = v.abs());
        layer.bias.data_mut().iter_mut().for_each(|v| *v = 1.0);
        for c in 0..k {
            for row in 0..layer.weight.shape()[0] {
                layer.weight.data_mut()[row * cols + c] = 0.0;
            }
            layer.bias.data_mut()[c] = -1.0;
        }
    }
    let probe = rand_tensor(&[8, 3], 0.0, 1.0, &mut rng(trial + 100));
    let full = dormant_ratio(&net, &probe, 0.0).map_err(|e| e.to_string())?;
    let min_live = full
        .per_layer
        .iter()
        .flat_map(|l| l.scores.iter().copied())
        .filter(|&s| s > 0.0)
        .fold(f64::INFINITY, f64::min);
    let want = dead as f64 / (widths[0] + widths[1]) as f64;
    for frac in [1e-9, 0.25, 0.5, 0.999] {
        let tau = frac * min_live;
        let got = dormant_ratio(&net, &probe, tau).map_err(|e| e.to_string())?.ratio;
        if got != want {
            return Err(format!("trial {trial}: tau {tau} gives {got}, expected {want}"));
        }
    }
    Ok(())
}
