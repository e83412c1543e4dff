mod common;

use std::sync::Arc;

use common::oracles::*;
use common::*;
use moerl_core::analysis::{grad_cosine, usage_matrix, GradientRecord, GroupBy};
use moerl_core::autodiff::Mlp;
use moerl_core::dormant::dormant_ratio;
use moerl_core::moe::{gate_from_logits, load_balance_loss};
use moerl_core::perturb::{apply_perturbation, perturb_factor, ParamLayout, PerturbConfig, TopAgentBuffer, WeightVector};
use moerl_core::rlcore::{ReplayBuffer, RouteRecord, Transition};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moe_matches_brute_force(
        n in 1usize..=8, kf in 0.0f64..1.0, input in 1usize..=16, hidden in 1usize..=16,
        output in 1usize..=16, seed in any::<u64>(),
    ) {
        let k = 1 + ((kf * n as f64) as usize).min(n - 1);
        let layer = random_moe(input, hidden, output, n, k, seed);
        let mut r = rng(seed ^ 1);
        let z: Vec<f64> = (0..input).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = layer.forward(&z).unwrap();
        let want = moe_oracle(&layer, &z);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn load_balance_is_bounded(n in 1usize..10, rows in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let probs: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let l: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
                gate_from_logits(&l, 1).unwrap().full_probs
            })
            .collect();
        let refs: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
        let lb = load_balance_loss(&refs).unwrap();
        prop_assert!(lb <= 1e-12 && lb >= -(n as f64).ln() - 1e-12);
    }

    #[test]
    fn dormant_ratio_monotone_in_tau(seed in any::<u64>(), t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
        let net = Mlp::new(&[4, 8, 6, 2], &mut rng(seed));
        let probe = rand_tensor(&[16, 4], -1.0, 1.0, &mut rng(seed ^ 3));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = dormant_ratio(&net, &probe, lo).unwrap().ratio;
        let b = dormant_ratio(&net, &probe, hi).unwrap().ratio;
        prop_assert!(a <= b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn cosine_invariants(seed in any::<u64>(), groups in 2usize..5, dim in 1usize..12, s in 0.01f64..100.0) {
        let mut r = rng(seed);
        let recs: Vec<GradientRecord> = (0..groups)
            .map(|g| GradientRecord { group: g, gradient: (0..dim).map(|_| r.random_range(-1.0..1.0)).collect(), step: 0 })
            .collect();
        let m = grad_cosine(&recs).unwrap();
        let mut scaled = recs.clone();
        scaled[0].gradient.iter_mut().for_each(|v| *v *= s);
        let ms = grad_cosine(&scaled).unwrap();
        let mut flipped = recs.clone();
        flipped[0].gradient.iter_mut().for_each(|v| *v = -*v);
        let mf = grad_cosine(&flipped).unwrap();
        for i in 0..groups {
            for j in 0..groups {
                let c = m.values[i][j].unwrap();
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
                prop_assert_eq!(Some(c), m.values[j][i]);
                prop_assert!((ms.values[i][j].unwrap() - c).abs() < 1e-12);
                if i == j {
                    prop_assert!((c - 1.0).abs() < 1e-12);
                } else if i == 0 || j == 0 {
                    prop_assert!((mf.values[i][j].unwrap() + c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn usage_rows_are_distributions(seed in any::<u64>(), n in 1usize..8, count in 1usize..40) {
        let mut r = rng(seed);
        let k = r.random_range(1..=n);
        let recs: Vec<RouteRecord> = (0..count)
            .map(|t| {
                let l: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
                RouteRecord { task: r.random_range(0..3), stage: r.random_range(0..4), t, gates: gate_from_logits(&l, k).unwrap().dense_weights() }
            })
            .collect();
        for g in [GroupBy::Task, GroupBy::Stage, GroupBy::TimeBin(5)] {
            let u = usage_matrix(&recs, g).unwrap();
            for row in &u.rows {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn replay_n_step_matches_walk(
        seed in any::<u64>(), cap in 3usize..40, pushes in 1usize..80, n in 1usize..5, gamma in 0.0f64..1.0,
    ) {
        let mut r = rng(seed);
        let mut buf = ReplayBuffer::new(cap, 1, 1, n, gamma).unwrap();
        let mut stream = Vec::new();
        for i in 0..pushes {
            let terminal = r.random_bool(0.1);
            let done = terminal || r.random_bool(0.1);
            let t = Transition {
                obs: vec![i as f64],
                action: vec![0.0],
                reward: r.random_range(-1.0..1.0),
                next_obs: vec![i as f64 + 0.5],
                terminal,
                done,
                group: 0,
            };
            stream.push(t.clone());
            buf.push(t).unwrap();
        }
        let batch = buf.sample(32, &mut r).unwrap();
        for b in 0..32 {
            let s = batch.obs.data()[b] as usize;
            prop_assert!(s + cap >= pushes, "sampled an overwritten transition");
            let (mut sum, mut g, mut m) = (0.0, 1.0, s);
            loop {
                sum += g * stream[m].reward;
                g *= gamma;
                if stream[m].done || m + 1 == pushes || m + 1 - s == n {
                    break;
                }
                m += 1;
            }
            let disc = if stream[m].terminal { 0.0 } else { g };
            prop_assert!((batch.reward[b] - sum).abs() < 1e-12);
            prop_assert!((batch.discount[b] - disc).abs() < 1e-12);
            prop_assert_eq!(batch.next_obs.data()[b], m as f64 + 0.5);
        }
    }

    #[test]
    fn perturb_factor_is_clipped_linear(beta in 0.0f64..1.0, rate in 0.1f64..5.0, lo in 0.0f64..0.5, span in 0.0f64..0.5) {
        let cfg = PerturbConfig { alpha_min: lo, alpha_max: lo + span, rate, interval_frames: 1 };
        let a = perturb_factor(beta, &cfg);
        let want = (1.0 - rate * beta).max(lo).min(lo + span);
        prop_assert!((a - want).abs() <= 1e-12);
    }

    #[test]
    fn perturbation_endpoints_exact(seed in any::<u64>(), dim in 1usize..30) {
        let mut r = rng(seed);
        let layout = Arc::new(ParamLayout::from_entries(vec![("w".into(), vec![dim])]));
        let theta = WeightVector::new(layout.clone(), (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let phi = WeightVector::new(layout, (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let keep = apply_perturbation(&theta, &phi, 1.0).unwrap();
        let replace = apply_perturbation(&theta, &phi, 0.0).unwrap();
        prop_assert_eq!(keep.data(), theta.data());
        prop_assert_eq!(replace.data(), phi.data());
    }
}

#[test]
fn top_agent_buffer_matches_sort_oracle() {
    assert!((0..1000).all(top_agent_stream_agrees));
}

#[test]
fn crafted_dormant_networks_are_exact() {
    for trial in 0..50 {
        crafted_dormant_exact(trial).unwrap();
    }
}

#[test]
fn perturb_factor_grid() {
    let cfg = PerturbConfig::default();
    for i in 0..100 {
        let beta = i as f64 / 99.0;
        let want = (1.0 - cfg.rate * beta).clamp(cfg.alpha_min, cfg.alpha_max);
        assert!((perturb_factor(beta, &cfg) - want).abs() <= 1e-12);
    }
}

#[test]
fn zero_spread_buffer_samples_its_mean() {
    let layout = Arc::new(ParamLayout::from_entries(vec![("w".into(), vec![4])]));
    let mut buf = TopAgentBuffer::new(3).unwrap();
    for rw in [1.0, 2.0, 3.0] {
        buf.maybe_insert(WeightVector::new(layout.clone(), vec![0.5, -1.0, 2.0, 0.0]).unwrap(), rw).unwrap();
    }
    let d = buf.oriented_distribution().unwrap();
    assert!(d.std.iter().all(|&s| s == 0.0));
    assert_eq!(d.sample(&mut rng(1)).data(), &[0.5, -1.0, 2.0, 0.0]);
}

#[test]
fn candidate_equal_to_current_weights_is_a_no_op() {
    let net = Mlp::new(&[3, 4, 2], &mut rng(4));
    let theta = WeightVector::flatten(&net, "", &|_| true);
    for alpha in [0.0, 0.2, 0.5, 0.9, 1.0] {
        let mixed = apply_perturbation(&theta, &theta, alpha).unwrap();
        for (a, b) in mixed.data().iter().zip(theta.data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }
}
