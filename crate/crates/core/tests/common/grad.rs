//! Finite-difference probes shared by the gradient tests and the acceptance run.

use moerl_core::autodiff::{Module, Tape, Tensor, Var};
use moerl_core::envs::ObsShape;
use moerl_core::rlcore::{Agent, AgentConfig, TrunkKind};
use rand::Rng;

use super::*;

pub fn t(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(shape, -1.0, 1.0, &mut rng(seed))
}

/// Entries bounded away from zero so relu probes stay off the kink.
pub fn off_kink(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.05..1.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error of every primitive tape op, by name.
pub fn primitive_op_errors() -> Vec<(String, Option<f64>)> {
    let mut out: Vec<(String, Option<f64>)> = Vec::new();
    let mut push = |name: &str, e: Option<f64>| out.push((name.to_string(), e));
    let (a, b) = (t(&[3, 4], 1), t(&[3, 4], 2));
    push("add", check_op(&[a.clone(), b.clone()], 1, |tp, v| tp.add(v[0], v[1])));
    push("sub", check_op(&[a.clone(), b.clone()], 2, |tp, v| tp.sub(v[0], v[1])));
    push("mul", check_op(&[a.clone(), b.clone()], 3, |tp, v| tp.mul(v[0], v[1])));
    push("scale", check_op(&[a.clone()], 4, |tp, v| tp.scale(v[0], -2.5)));
    push("matmul", check_op(&[t(&[3, 5], 5), t(&[5, 2], 6)], 5, |tp, v| tp.matmul(v[0], v[1])));
    push("add_row", check_op(&[a.clone(), t(&[1, 4], 7)], 6, |tp, v| tp.add_row(v[0], v[1])));
    push("tanh", check_op(&[a.clone()], 7, |tp, v| tp.tanh(v[0])));
    push("relu", check_op(&[off_kink(&[3, 4], 8)], 8, |tp, v| tp.relu(v[0])));
    push("sum", check_op(&[a.clone()], 9, |tp, v| tp.sum(v[0])));
    push("mean", check_op(&[a.clone()], 10, |tp, v| tp.mean(v[0])));
    push("mean_rows", check_op(&[a.clone()], 11, |tp, v| tp.mean_rows(v[0])));
    push("concat_cols", check_op(&[a.clone(), t(&[3, 2], 12)], 12, |tp, v| tp.concat_cols(v[0], v[1])));
    push("column", check_op(&[a.clone()], 13, |tp, v| tp.column(v[0], 2)));
    push("scale_rows", check_op(&[a.clone(), t(&[3, 1], 14)], 14, |tp, v| tp.scale_rows(v[0], v[1])));
    push("reshape", check_op(&[a.clone()], 15, |tp, v| tp.reshape(v[0], vec![2, 6])));
    let pos = rand_tensor(&[3, 4], 0.05, 2.0, &mut rng(16));
    push("xlogx", check_op(&[pos], 16, |tp, v| tp.xlogx(v[0])));

    let x = t(&[3, 5], 20);
    push("softmax rows", check_op(&[x.clone()], 20, |tp, v| tp.softmax(v[0], 1)));
    push("softmax cols", check_op(&[x.clone()], 21, |tp, v| tp.softmax(v[0], 0)));
    let mask: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
    push("masked softmax", check_op(&[x], 22, move |tp, v| tp.masked_softmax_rows(v[0], mask.clone())));

    let x = t(&[2, 3, 7, 6], 30);
    let w = t(&[4, 3, 3, 3], 31);
    let b = t(&[4], 32);
    for stride in [1, 2] {
        push(
            &format!("conv2d stride {stride}"),
            check_op(&[x.clone(), w.clone(), b.clone()], 33 + stride as u64, move |tp, v| {
                tp.conv2d(v[0], v[1], Some(v[2]), stride)
            }),
        );
        push(
            &format!("conv2d no bias stride {stride}"),
            check_op(&[x.clone(), w.clone()], 40 + stride as u64, move |tp, v| tp.conv2d(v[0], v[1], None, stride)),
        );
    }
    out
}

/// Checks gradients of `Σ f(params) ⊙ R` w.r.t. a module's parameters.
pub fn check_module<M, F>(module: &M, seed: u64, f: F) -> Option<f64>
where
    M: Module + Clone,
    F: Fn(&M, &mut Tape) -> moerl_core::Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(module, &mut tape).unwrap();
    if tape.min_abs_relu_input().is_some_and(|m| m < KINK_MARGIN) {
        return None;
    }
    let w = rand_tensor(tape.shape(out), -1.0, 1.0, &mut rng(seed));
    let loss = project(&mut tape, out, &w).unwrap();
    let grads = tape.backward(loss).unwrap();
    let value = |m: &M| {
        let mut tp = Tape::new();
        let o = f(m, &mut tp).unwrap();
        let l = project(&mut tp, o, &w).unwrap();
        tp.value(l)[0]
    };
    let mut names = Vec::new();
    module.visit("", &mut |n, p| names.push((n.to_string(), p.numel(), grads.of_param(p).map(|g| g.to_vec()))));
    let mut worst: f64 = 0.0;
    let mut r = rng(seed ^ 7);
    for (name, numel, g) in names {
        let g = g.unwrap_or_else(|| vec![0.0; numel]);
        for _ in 0..numel.min(12) {
            let i = r.random_range(0..numel);
            let shifted = |d: f64| {
                let mut m = module.clone();
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.data_mut()[i] += d;
                    }
                });
                value(&m)
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g[i], numeric));
        }
    }
    Some(worst)
}

/// Full actor loss, `−mean Q1(z, π(z)) + λ·LB`, against every actor parameter tensor.
pub fn actor_loss_error(trunk: TrunkKind, seed: u64) -> Option<f64> {
    let cfg = AgentConfig {
        trunk,
        latent_dim: 6,
        expert_hidden: 5,
        trunk_out: 4,
        critic_hidden: 7,
        lb_weight: 0.5,
        ..Default::default()
    };
    let agent = Agent::new(cfg, ObsShape::Vector(3), 2, &mut rng(seed)).unwrap();
    let z = t(&[5, 6], 1000 + seed);
    let mut tape = Tape::new();
    let loss = agent.actor_loss_on_tape(&mut tape, &z, 0.5).unwrap();
    if tape.min_abs_relu_input().is_some_and(|m| m < KINK_MARGIN) || routing_margin(&loss.forward.gates, 2) < KINK_MARGIN {
        return None;
    }
    let grads = tape.backward(loss.total).unwrap();
    let value = |a: &Agent| {
        let mut tp = Tape::new();
        let l = a.actor_loss_on_tape(&mut tp, &z, 0.5).unwrap();
        tp.value(l.total)[0]
    };
    let mut params = Vec::new();
    agent.nets.actor.visit("", &mut |n, p| params.push((n.to_string(), p.numel(), grads.of_param(p).map(|g| g.to_vec()))));
    let mut worst: f64 = 0.0;
    let mut r = rng(seed);
    for (name, numel, g) in params {
        let g = g.unwrap_or_else(|| vec![0.0; numel]);
        for _ in 0..numel.min(10) {
            let i = r.random_range(0..numel);
            let shifted = |d: f64| {
                let mut a = agent.clone();
                a.nets.actor.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.data_mut()[i] += d;
                    }
                });
                value(&a)
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g[i], numeric));
        }
    }
    Some(worst)
}

