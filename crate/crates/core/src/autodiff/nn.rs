//! Layers built on the tape, plus the parameter visitor every network implements.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

/// Named access to the trainable tensors of a network.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Orthogonal matrix of shape `rows × cols` scaled by `gain`
/// (orthonormal rows or columns, whichever is fewer).
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // Columns of a long×short Gaussian matrix, orthonormalised by modified Gram-Schmidt.
    let mut q: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..long).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for j in 0..short {
        for p in 0..j {
            let (head, tail) = q.split_at_mut(j);
            let d: f64 = head[p].iter().zip(tail[0].iter()).map(|(a, b)| a * b).sum();
            tail[0].iter_mut().zip(&head[p]).for_each(|(x, qp)| *x -= d * qp);
        }
        let norm = q[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        q[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain
                * if rows >= cols { q[c][r] } else { q[r][c] };
        }
    }
    out
}

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self::with_gain(input, output, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let w = orthogonal(input, output, gain, rng);
        Self {
            weight: Tensor::new(vec![input, output], w).expect("finite init").with_grad(),
            bias: Tensor::zeros(vec![1, output]).with_grad(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan = in_ch * kernel * kernel;
        let w = orthogonal(out_ch, fan, std::f64::consts::SQRT_2, rng);
        Self {
            weight: Tensor::new(vec![out_ch, in_ch, kernel, kernel], w).expect("finite init").with_grad(),
            bias: Tensor::zeros(vec![out_ch]).with_grad(),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, Some(b), self.stride)
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.weight.shape()[2];
        if k > h || k > w {
            return dim_err(format!("kernel {k} does not fit {h}×{w}"));
        }
        Ok(((h - k) / self.stride + 1, (w - k) / self.stride + 1))
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Relu MLP; the last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_with_hidden(tape, x)?.0)
    }

    /// Output plus the post-activation value of every hidden layer.
    pub fn forward_with_hidden(&self, tape: &mut Tape, mut x: Var) -> Result<(Var, Vec<Var>)> {
        let mut hidden = Vec::new();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last {
                x = tape.relu(x)?;
                hidden.push(x);
            }
        }
        Ok((x, hidden))
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
