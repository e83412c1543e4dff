#![allow(dead_code)]

use moerl_core::autodiff::{Tape, Tensor, Var};
use moerl_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub mod grad;
pub mod oracles;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Scalar `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
pub fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights);
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

/// Worst relative error between the tape gradient and central differences
/// of `Σ op(inputs) ⊙ R` with respect to every input entry.
/// Returns `None` if the forward pass touches a relu input within the kink margin.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, op: F) -> Option<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = op(&mut tape, &vars).unwrap();
    if tape.min_abs_relu_input().is_some_and(|m| m < KINK_MARGIN) {
        return None;
    }
    let weights = rand_tensor(tape.shape(out), -1.0, 1.0, &mut rng(seed ^ 0xabc));
    let loss = project(&mut tape, out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let value = |ins: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x)).collect();
        let o = op(&mut t, &vs).unwrap();
        let l = project(&mut t, o, &weights).unwrap();
        t.value(l)[0]
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    Some(worst)
}

/// Smallest gap between the k-th and (k+1)-th router logit over a batch of gates.
pub fn routing_margin(gates: &[moerl_core::moe::GateResult], k: usize) -> f64 {
    gates
        .iter()
        .map(|g| {
            let mut l: Vec<f64> = g.full_probs.iter().map(|p| p.ln()).collect();
            l.sort_by(|a, b| b.total_cmp(a));
            if k < l.len() { l[k - 1] - l[k] } else { f64::INFINITY }
        })
        .fold(f64::INFINITY, f64::min)
}

/// `x·W + b` for one row.
pub fn linear_row(l: &moerl_core::autodiff::Linear, x: &[f64]) -> Vec<f64> {
    let (i, o) = (l.weight.shape()[0], l.weight.shape()[1]);
    assert_eq!(x.len(), i);
    (0..o)
        .map(|c| l.bias.data()[c] + (0..i).map(|r| x[r] * l.weight.data()[r * o + c]).sum::<f64>())
        .collect()
}

/// Evaluates every expert, then mixes the `k` with the largest router logits
/// by a softmax over those logits.
pub fn moe_oracle(layer: &moerl_core::moe::MoeLayer, z: &[f64]) -> Vec<f64> {
    let logits = linear_row(&layer.router.linear, z);
    let outputs: Vec<Vec<f64>> = layer
        .experts
        .iter()
        .map(|e| {
            let h: Vec<f64> = linear_row(&e.hidden, z).into_iter().map(|v| v.max(0.0)).collect();
            linear_row(&e.out, &h)
        })
        .collect();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let chosen = &order[..layer.k()];
    let top = chosen.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = chosen.iter().map(|&i| (logits[i] - top).exp()).sum();
    let mut y = vec![0.0; layer.output_dim()];
    for &i in chosen {
        let w = (logits[i] - top).exp() / denom;
        y.iter_mut().zip(&outputs[i]).for_each(|(a, v)| *a += w * v);
    }
    y
}

/// MoE layer with uniform random weights (not the orthogonal init), so
/// routing is arbitrary.
pub fn random_moe(input: usize, hidden: usize, output: usize, n: usize, k: usize, seed: u64) -> moerl_core::moe::MoeLayer {
    use moerl_core::autodiff::Module;
    let mut layer = moerl_core::moe::MoeLayer::new(input, hidden, output, n, k, &mut rng(seed)).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    layer.visit_mut("", &mut |_, p| p.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0)));
    layer
}
