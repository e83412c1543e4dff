//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive as it executes. Parameters enter the
//! tape through [`Tape::param`], constants through [`Tape::constant`].
//! [`Tape::backward`] walks the record once in reverse and returns
//! [`Gradients`], which can be pushed back into parameter tensors.

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: usize,
    },
    XLogX(usize),
    ConcatCols(usize, usize),
    Column(usize, usize),
    ScaleRows(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<u64, usize>,
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<u64, usize>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter bound through [`Tape::param`].
    pub fn of_param(&self, t: &Tensor) -> Option<&[f64]> {
        self.params
            .get(&t.id())
            .and_then(|&i| self.grads[i].as_deref())
    }

    /// Adds this pass's gradient into `t.grad` when `t` was bound and reached.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<bool> {
        match self.of_param(t) {
            Some(g) => {
                let g = g.to_vec();
                t.accumulate_grad(&g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

fn same_or_scalar(a: &[usize], b: &[usize], an: usize, bn: usize, what: &str) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if an == 1 {
        Ok(b.to_vec())
    } else if bn == 1 {
        Ok(a.to_vec())
    } else {
        dim_err(format!("{what}: unsupported broadcast {a:?} vs {b:?}"))
    }
}

fn as_matrix(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{what}: expected matrix, got {s:?}")),
    }
}

/// Plain `m×k · k×n` product into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    /// Smallest `|x|` fed into any relu on this tape; used to keep
    /// finite-difference probes away from kinks.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => self.nodes[x].value.iter().map(|v| v.abs()).reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return dim_err(format!("constant shape {shape:?} vs {} values", value.len()));
        }
        self.push(shape, value, Op::Leaf, "constant")
    }

    /// Binds a parameter; binding the same tensor twice returns the same node.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&i) = self.params.get(&t.id()) {
            return Var(i);
        }
        let v = self.constant(t);
        self.params.insert(t.id(), v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a), "matmul lhs")?;
        let (k2, n) = as_matrix(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return dim_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a.0, b.0), "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (an, bn) = (self.value(a).len(), self.value(b).len());
        let shape = same_or_scalar(self.shape(a), self.shape(b), an, bn, name)?;
        let len: usize = shape.iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..len)
            .map(|i| f(av[if an == 1 { 0 } else { i }], bv[if bn == 1 { 0 } else { i }]))
            .collect();
        Ok((shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(s, v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(s, v, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(s, v, Op::Mul(a.0, b.0), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale(a.0, c), "scale")
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x), "add_row")?;
        if self.value(bias).len() != c {
            return dim_err(format!("bias of length {} for {c} columns", self.value(bias).len()));
        }
        let b = self.value(bias);
        let v = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, xv)| xv + b[i % c])
            .collect();
        self.push(vec![r, c], v, Op::AddRow(x.0, bias.0), "add_row")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(self.shape(a).to_vec(), v, Op::Relu(a.0), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(self.shape(a).to_vec(), v, Op::Tanh(a.0), "tanh")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a.0), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return dim_err("mean of empty tensor");
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![s], Op::Mean(a.0), "mean")
    }

    /// Column means of an `r×c` matrix, shaped `1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(a), "mean_rows")?;
        if r == 0 {
            return dim_err("mean_rows over zero rows");
        }
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(vec![1, c], out, Op::MeanRows(a.0), "mean_rows")
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} for shape {shape:?}"));
        }
        let n = shape[axis];
        if n == 0 {
            return dim_err("softmax over empty axis");
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (xv[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    out[idx(j)] /= s;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x: x.0, outer, n, inner }, "softmax")
    }

    /// Row-wise softmax restricted to entries where `mask` is set; masked-out
    /// entries are exactly zero and receive no gradient.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x), "masked_softmax_rows")?;
        if mask.len() != r * c {
            return dim_err("mask length does not match input");
        }
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return contract_err(format!("row {i} of masked softmax selects nothing"));
            }
            let mut s = 0.0;
            for j in 0..c {
                if m[j] {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    s += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        self.push(vec![r, c], out, Op::MaskedSoftmax { x: x.0 }, "masked_softmax")
    }

    /// Elementwise `x·ln x` with `0·ln 0 := 0`; inputs must be nonnegative.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x < 0.0) {
            return contract_err("xlogx of a negative value");
        }
        let v = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
            .collect();
        self.push(self.shape(a).to_vec(), v, Op::XLogX(a.0), "xlogx")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c1) = as_matrix(self.shape(a), "concat lhs")?;
        let (r2, c2) = as_matrix(self.shape(b), "concat rhs")?;
        if r != r2 {
            return dim_err(format!("concat rows {r} vs {r2}"));
        }
        let mut out = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            out.extend_from_slice(&self.value(a)[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&self.value(b)[i * c2..(i + 1) * c2]);
        }
        self.push(vec![r, c1 + c2], out, Op::ConcatCols(a.0, b.0), "concat_cols")
    }

    /// Column `j` of an `r×c` matrix as `r×1`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(a), "column")?;
        if j >= c {
            return dim_err(format!("column {j} of {c}"));
        }
        let v = (0..r).map(|i| self.value(a)[i * c + j]).collect();
        self.push(vec![r, 1], v, Op::Column(a.0, j), "column")
    }

    /// Multiplies row `i` of `x` (`r×c`) by `s[i]` (`s` is `r×1`).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x), "scale_rows")?;
        if self.value(s).len() != r {
            return dim_err(format!("row scale of length {} for {r} rows", self.value(s).len()));
        }
        let sv = self.value(s);
        let v = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, xv)| xv * sv[i / c])
            .collect();
        self.push(vec![r, c], v, Op::ScaleRows(x.0, s.0), "scale_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let v = self.value(a).to_vec();
        self.push(shape, v, Op::Reshape(a.0), "reshape")
    }

    /// Valid (unpadded) 2-D convolution of `B×C×H×W` input with `F×C×kh×kw`
    /// filters and an optional per-filter bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let g = conv_geometry(self.shape(x), self.shape(w), stride)?;
        if let Some(b) = b {
            if self.value(b).len() != g.f {
                return dim_err("conv bias length must equal filter count");
            }
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let mut out = vec![0.0; g.b * g.f * g.oh * g.ow];
        for bi in 0..g.b {
            for f in 0..g.f {
                let bias = bv.map(|v| v[f]).unwrap_or(0.0);
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = bias;
                        for c in 0..g.c {
                            for i in 0..g.kh {
                                let xrow = ((bi * g.c + c) * g.h + oy * stride + i) * g.w + ox * stride;
                                let wrow = ((f * g.c + c) * g.kh + i) * g.kw;
                                for j in 0..g.kw {
                                    acc += xv[xrow + j] * wv[wrow + j];
                                }
                            }
                        }
                        out[((bi * g.f + f) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        self.push(
            vec![g.b, g.f, g.oh, g.ow],
            out,
            Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), stride },
            "conv2d",
        )
    }

    /// Reverse pass from a scalar `loss`; each node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return contract_err("loss does not belong to this tape");
        }
        if self.nodes[loss.0].value.len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| self.nodes[i].value.as_slice();
        let mut acc = |i: usize, delta: Vec<f64>| match &mut grads[i] {
            Some(a) => a.iter_mut().zip(&delta).for_each(|(x, d)| *x += d),
            slot @ None => *slot = Some(delta),
        };
        // Reduces an elementwise gradient onto a possibly scalar operand.
        let reduce = |i: usize, full: Vec<f64>| -> Vec<f64> {
            if self.nodes[i].value.len() == 1 && full.len() != 1 {
                vec![full.iter().sum()]
            } else {
                full
            }
        };
        let bcast = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] = g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aval = av[i * k + p];
                        if aval == 0.0 {
                            continue;
                        }
                        gb[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(o, x)| *o += aval * x);
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, reduce(*a, g.to_vec()));
                acc(*b, reduce(*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce(*a, g.to_vec()));
                acc(*b, reduce(*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.iter().enumerate().map(|(i, x)| x * bcast(bv, i)).collect();
                let gb = g.iter().enumerate().map(|(i, x)| x * bcast(av, i)).collect();
                acc(*a, reduce(*a, ga));
                acc(*b, reduce(*b, gb));
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::AddRow(x, b) => {
                let c = self.nodes[*b].value.len();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                acc(*x, g.to_vec());
                acc(*b, gb);
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, g.iter().zip(av).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect());
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g.iter().zip(y).map(|(x, y)| x * (1.0 - y * y)).collect());
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.nodes[*a].value.len()]),
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.iter().map(|x| x / r as f64));
                }
                acc(*a, ga);
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..*n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::MaskedSoftmax { x, .. } => {
                let c = node.shape[1];
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for (row, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[row * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::XLogX(a) => {
                let av = val(*a);
                acc(*a, g.iter().zip(av).map(|(x, &v)| if v > 0.0 { x * (v.ln() + 1.0) } else { 0.0 }).collect());
            }
            Op::ConcatCols(a, b) => {
                let c1 = self.nodes[*a].shape[1];
                let c2 = self.nodes[*b].shape[1];
                let mut ga = Vec::new();
                let mut gb = Vec::new();
                for row in g.chunks(c1 + c2) {
                    ga.extend_from_slice(&row[..c1]);
                    gb.extend_from_slice(&row[c1..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Column(a, j) => {
                let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + j] = g[i];
                }
                acc(*a, ga);
            }
            Op::ScaleRows(x, s) => {
                let c = node.shape[1];
                let (xv, sv) = (val(*x), val(*s));
                let gx = g.iter().enumerate().map(|(i, v)| v * sv[i / c]).collect();
                let gs = g
                    .chunks(c)
                    .zip(xv.chunks(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*x, gx);
                acc(*s, gs);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Conv2d { x, w, b, stride } => {
                let geo = conv_geometry(&self.nodes[*x].shape, &self.nodes[*w].shape, *stride)
                    .expect("validated on forward");
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; geo.f];
                for bi in 0..geo.b {
                    for f in 0..geo.f {
                        for oy in 0..geo.oh {
                            for ox in 0..geo.ow {
                                let go = g[((bi * geo.f + f) * geo.oh + oy) * geo.ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                gb[f] += go;
                                for c in 0..geo.c {
                                    for i in 0..geo.kh {
                                        let xrow = ((bi * geo.c + c) * geo.h + oy * stride + i) * geo.w + ox * stride;
                                        let wrow = ((f * geo.c + c) * geo.kh + i) * geo.kw;
                                        for j in 0..geo.kw {
                                            gx[xrow + j] += go * wv[wrow + j];
                                            gw[wrow + j] += go * xv[xrow + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
        }
    }
}

struct ConvGeometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(xs: &[usize], ws: &[usize], stride: usize) -> Result<ConvGeometry> {
    let [b, c, h, w] = *xs else {
        return dim_err(format!("conv2d input must be B×C×H×W, got {xs:?}"));
    };
    let [f, c2, kh, kw] = *ws else {
        return dim_err(format!("conv2d kernel must be F×C×kh×kw, got {ws:?}"));
    };
    if c != c2 {
        return dim_err(format!("conv2d channels {c} vs kernel {c2}"));
    }
    if stride == 0 {
        return dim_err("conv2d stride must be positive");
    }
    if kh > h || kw > w || kh == 0 || kw == 0 {
        return dim_err(format!("kernel {kh}×{kw} does not fit input {h}×{w}"));
    }
    Ok(ConvGeometry {
        b,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh: (h - kh) / stride + 1,
        ow: (w - kw) / stride + 1,
    })
}
