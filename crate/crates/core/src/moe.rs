//! Sparse mixture-of-experts layer with top-k routing and a load-balancing loss.
//!
//! The router maps a latent vector to one logit per expert. The top-k logits
//! (ties broken toward the lowest index) are renormalised with a softmax over
//! the selected entries only; the full softmax over all logits is kept for the
//! balancing loss. Every expert is evaluated densely and the unselected
//! outputs are multiplied by an exact zero, so they receive no gradient.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{join, Linear, Module, Tape, Tensor, Var};
use crate::error::{contract_err, dim_err, Error, Result};

/// Two linear layers with a relu between them.
#[derive(Debug, Clone)]
pub struct ExpertFfn {
    pub hidden: Linear,
    pub out: Linear,
}

impl ExpertFfn {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(input, hidden, rng),
            out: Linear::new(hidden, output, rng),
        }
    }

    /// Returns `(output, post-relu hidden)`.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, z)?;
        let h = tape.relu(h)?;
        Ok((self.out.forward(tape, h)?, h))
    }
}

impl Module for ExpertFfn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Linear map from latent to one logit per expert.
#[derive(Debug, Clone)]
pub struct Router {
    pub linear: Linear,
}

/// Routing decision for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    /// Selected experts, highest logit first.
    pub indices: Vec<usize>,
    /// Gate weight of each selected expert, aligned with `indices`.
    pub weights: Vec<f64>,
    /// Softmax over all logits.
    pub full_probs: Vec<f64>,
}

impl GateResult {
    /// Dense per-expert weight, zero for unselected experts.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.full_probs.len()];
        for (&i, &v) in self.indices.iter().zip(&self.weights) {
            w[i] = v;
        }
        w
    }
}

/// Indices of the `k` largest logits, highest first; equal logits keep index order.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-k gate computed directly from logits.
pub fn gate_from_logits(logits: &[f64], k: usize) -> Result<GateResult> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!(
            "top-k of {k} over {} experts",
            logits.len()
        )));
    }
    let indices = top_k_indices(logits, k);
    let m = indices.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = indices.iter().map(|&i| (logits[i] - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let mall = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let eall: Vec<f64> = logits.iter().map(|l| (l - mall).exp()).collect();
    let sall: f64 = eall.iter().sum();
    Ok(GateResult {
        indices,
        weights: e.iter().map(|v| v / s).collect(),
        full_probs: eall.iter().map(|v| v / sall).collect(),
    })
}

/// Tape outputs of a batched MoE forward pass.
#[derive(Debug)]
pub struct MoeForward {
    /// `B × out` combined expert output.
    pub output: Var,
    /// `B × N` softmax over all router logits.
    pub full_probs: Var,
    /// `B × N` gate weights, zero outside the top-k.
    pub gate_weights: Var,
    pub gates: Vec<GateResult>,
    /// Post-relu hidden layer of each expert, `B × hidden`.
    pub expert_hidden: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub experts: Vec<ExpertFfn>,
    pub router: Router,
    k: usize,
}

impl MoeLayer {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        num_experts: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_experts == 0 || k == 0 || k > num_experts {
            return Err(Error::Config(format!(
                "need 1 <= k <= N, got k={k}, N={num_experts}"
            )));
        }
        let router = Router {
            linear: Linear::new(input, num_experts, rng),
        };
        let experts = (0..num_experts)
            .map(|_| ExpertFfn::new(input, hidden, output, rng))
            .collect();
        Ok(Self { experts, router, k })
    }

    /// Assembles a layer from explicit parts; every expert must share its shapes.
    pub fn from_parts(router: Linear, experts: Vec<ExpertFfn>, k: usize) -> Result<Self> {
        let n = experts.len();
        if n == 0 || k == 0 || k > n {
            return Err(Error::Config(format!("need 1 <= k <= N, got k={k}, N={n}")));
        }
        if router.output_dim() != n {
            return dim_err(format!("router emits {} logits for {n} experts", router.output_dim()));
        }
        let shape0: Vec<Vec<usize>> = {
            let mut s = Vec::new();
            experts[0].visit("", &mut |_, t| s.push(t.shape().to_vec()));
            s
        };
        for e in &experts[1..] {
            let mut s = Vec::new();
            e.visit("", &mut |_, t| s.push(t.shape().to_vec()));
            if s != shape0 {
                return dim_err("experts differ in shape");
            }
        }
        if experts[0].hidden.input_dim() != router.input_dim() {
            return dim_err("router and experts disagree on input dim");
        }
        Ok(Self {
            experts,
            router: Router { linear: router },
            k,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.router.linear.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.experts[0].out.output_dim()
    }

    /// Parameter count of a layer with the given sizes.
    pub fn param_count_for(input: usize, hidden: usize, output: usize, num_experts: usize) -> usize {
        let router = input * num_experts + num_experts;
        let expert = input * hidden + hidden + hidden * output + output;
        router + num_experts * expert
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim() {
            return dim_err(format!("latent of length {} for input dim {}", z.len(), self.input_dim()));
        }
        Ok(())
    }

    /// Router logits for one latent vector.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1, z.len()], z.to_vec())?;
        let l = self.router.linear.forward(&mut tape, x)?;
        Ok(tape.value(l).to_vec())
    }

    pub fn route(&self, z: &[f64]) -> Result<GateResult> {
        gate_from_logits(&self.logits(z)?, self.k)
    }

    /// `Σ_{i∈topk} w(i;z)·FFN_i(z)` for one latent vector.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1, z.len()], z.to_vec())?;
        let out = self.forward_tape(&mut tape, x)?;
        Ok(tape.value(out.output).to_vec())
    }

    /// Batched forward on a tape; `z` is `B × input`.
    pub fn forward_tape(&self, tape: &mut Tape, z: Var) -> Result<MoeForward> {
        let logits = self.router.linear.forward(tape, z)?;
        let n = self.num_experts();
        let rows = tape.shape(logits)[0];
        let mut mask = vec![false; rows * n];
        for (r, row) in tape.value(logits).chunks(n).enumerate() {
            for i in top_k_indices(row, self.k) {
                mask[r * n + i] = true;
            }
        }
        let gate_weights = tape.masked_softmax_rows(logits, mask)?;
        let full_probs = tape.softmax(logits, 1)?;

        let mut output: Option<Var> = None;
        let mut expert_hidden = Vec::with_capacity(n);
        for (i, expert) in self.experts.iter().enumerate() {
            let (f, h) = expert.forward(tape, z)?;
            expert_hidden.push(h);
            let w = tape.column(gate_weights, i)?;
            let contrib = tape.scale_rows(f, w)?;
            output = Some(match output {
                Some(acc) => tape.add(acc, contrib)?,
                None => contrib,
            });
        }

        let lv = tape.value(logits).to_vec();
        let wv = tape.value(gate_weights).to_vec();
        let pv = tape.value(full_probs).to_vec();
        let gates = (0..rows)
            .map(|r| {
                let indices = top_k_indices(&lv[r * n..(r + 1) * n], self.k);
                let weights = indices.iter().map(|&i| wv[r * n + i]).collect();
                GateResult {
                    indices,
                    weights,
                    full_probs: pv[r * n..(r + 1) * n].to_vec(),
                }
            })
            .collect();
        Ok(MoeForward {
            output: output.expect("at least one expert"),
            full_probs,
            gate_weights,
            gates,
            expert_hidden,
        })
    }
}

impl Module for MoeLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.router.linear.visit(&join(prefix, "router"), f);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("expert{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.router.linear.visit_mut(&join(prefix, "router"), f);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("expert{i}")), f);
        }
    }
}

fn check_prob_rows(rows: &[&[f64]]) -> Result<usize> {
    let Some(first) = rows.first() else {
        return contract_err("load balancing needs at least one row");
    };
    let n = first.len();
    for (b, r) in rows.iter().enumerate() {
        if r.len() != n {
            return dim_err("probability rows differ in length");
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-6 || r.iter().any(|&p| p < 0.0) {
            return contract_err(format!("row {b} is not a probability vector (sum {s})"));
        }
    }
    Ok(n)
}

/// Negative entropy `Σ p(i) log p(i)` of the batch-mean expert distribution.
pub fn load_balance_loss(rows: &[&[f64]]) -> Result<f64> {
    let n = check_prob_rows(rows)?;
    let mut p = vec![0.0; n];
    for r in rows {
        p.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
    }
    Ok(p
        .iter()
        .map(|&s| s / rows.len() as f64)
        .map(|pi| if pi > 0.0 { pi * pi.ln() } else { 0.0 })
        .sum())
}

/// Tape version of [`load_balance_loss`]; gradient flows into the router through `full_probs`.
pub fn load_balance_loss_tape(tape: &mut Tape, full_probs: Var) -> Result<Var> {
    let (b, n) = match tape.shape(full_probs) {
        [b, n] => (*b, *n),
        s => return dim_err(format!("full_probs must be B×N, got {s:?}")),
    };
    let vals = tape.value(full_probs).to_vec();
    let rows: Vec<&[f64]> = vals.chunks(n).collect();
    debug_assert_eq!(rows.len(), b);
    check_prob_rows(&rows)?;
    let p = tape.mean_rows(full_probs)?;
    let plogp = tape.xlogx(p)?;
    tape.sum(plogp)
}

/// Mean gate weight per expert over a batch (0 where unselected).
pub fn expert_usage(gates: &[GateResult]) -> Result<Vec<f64>> {
    let Some(first) = gates.first() else {
        return contract_err("expert usage of an empty batch");
    };
    let n = first.full_probs.len();
    let mut usage = vec![0.0; n];
    for g in gates {
        if g.full_probs.len() != n {
            return dim_err("gate results disagree on expert count");
        }
        for (&i, &w) in g.indices.iter().zip(&g.weights) {
            usage[i] += w;
        }
    }
    usage.iter_mut().for_each(|u| *u /= gates.len() as f64);
    Ok(usage)
}

/// [`expert_usage`] computed separately for each label.
pub fn expert_usage_grouped<L: Ord + Clone>(gates: &[GateResult], labels: &[L]) -> Result<BTreeMap<L, Vec<f64>>> {
    if gates.len() != labels.len() {
        return dim_err("one label per gate result required");
    }
    let mut groups: BTreeMap<L, Vec<GateResult>> = BTreeMap::new();
    for (g, l) in gates.iter().zip(labels) {
        groups.entry(l.clone()).or_default().push(g.clone());
    }
    groups
        .into_iter()
        .map(|(l, gs)| Ok((l, expert_usage(&gs)?)))
        .collect()
}
