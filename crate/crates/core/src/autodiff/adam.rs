use std::collections::BTreeMap;

use super::nn::Module;
use super::tensor::Tensor;

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias-corrected first and second moments, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every tensor carrying a gradient, then clears it.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, prefix: &str) {
        module.visit_mut(prefix, &mut |name, t| self.update(name, t));
    }

    fn update(&mut self, name: &str, t: &mut Tensor) {
        let Some(g) = t.grad().map(|g| g.to_vec()) else { return };
        let st = self.state.entry(name.to_string()).or_default();
        if st.m.len() != g.len() {
            st.m = vec![0.0; g.len()];
            st.v = vec![0.0; g.len()];
            st.t = 0;
        }
        st.t += 1;
        let bc1 = 1.0 - self.beta1.powi(st.t as i32);
        let bc2 = 1.0 - self.beta2.powi(st.t as i32);
        for ((p, gi), (m, v)) in t
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(st.m.iter_mut().zip(st.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
            *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        t.zero_grad();
    }

    /// Forgets the moments of every parameter whose name starts with one of `prefixes`.
    pub fn reset(&mut self, prefixes: &[&str]) {
        self.state
            .retain(|name, _| !prefixes.iter().any(|p| name.starts_with(p)));
    }

    pub fn tracked(&self) -> usize {
        self.state.len()
    }
}
