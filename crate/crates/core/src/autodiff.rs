//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation is a method on [`Tape`] that computes its
//! value eagerly and appends a node recording its inputs. [`Tape::backward`]
//! walks the nodes in reverse and returns the gradients of every node that
//! depends on a `requires_grad` leaf.
//!
//! Parameters are bound by name through [`Tape::param`]: binding the same name
//! twice returns the same [`Var`], so a batch of images pushed through one tape
//! shares (and accumulates into) a single gradient per parameter.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Transpose(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        // normalized input and per-row 1/sqrt(var + eps), kept for backward
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    L1Mean(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; used for teacher and evaluation
    /// forward passes.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn push_raw(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf copied from `t`; it is differentiated iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = self.grad_enabled && t.requires_grad();
        self.push_raw(t.clone(), Op::Leaf, needs)
    }

    /// Records an owned constant that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Binds a named parameter, reusing the existing leaf if `name` is already
    /// bound on this tape.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).dims2()?;
        let (p2, n) = self.value(b).dims2()?;
        if p != p2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, p, n);
        let value = Tensor::new([m, n], data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[d]` (or `[1×d]`) row vector to every row of `x[..×d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        let rshape = self.shape(row);
        let ok = match rshape {
            [n] => *n == d,
            [1, n] => *n == d,
            _ => false,
        };
        if !ok || d == 0 {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(d)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())
            .expect("shape preserved");
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let value = Tensor::new([c, r], kernels::transpose(self.value(x).data(), r, c))?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let shape0 = self.shape(*first).to_vec();
        if axis >= shape0.len() {
            return Err(Error::dim("concat", &shape0, &[axis]));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &shape0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = self.value(*v);
                let ext = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = shape0;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f32 = t.data().iter().sum::<f32>() / t.numel() as f32;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.abs()).collect())
            .expect("shape preserved");
        self.push(value, Op::Abs(x), &[x])
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = match t.shape().last() {
            Some(&n) if n >= 1 => n,
            _ => return Err(Error::dim("softmax", t.shape(), &[])),
        };
        let value = Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), n))?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Per-row layer normalization with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = match self.shape(x).last() {
            Some(&d) if d >= 1 => d,
            _ => return Err(Error::dim("layer_norm", self.shape(x), &[])),
        };
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0f32; xs.len()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| kernels::gelu(v)).collect())
            .expect("shape preserved");
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("l1_mean_loss", self.shape(a), self.shape(b)));
        }
        let ta = self.value(a).data();
        let tb = self.value(b).data();
        let s: f32 = ta.iter().zip(tb).map(|(x, y)| (x - y).abs()).sum();
        let value = Tensor::scalar(s / ta.len() as f32);
        Ok(self.push(value, Op::L1Mean(a, b), &[a, b]))
    }

    /// Mean softmax cross-entropy of `[n×classes]` logits against class
    /// indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if n != targets.len() || n == 0 {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("target class {bad} out of range for {c} logits")));
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_rows(x, c);
        let mut total = 0.0f32;
        for (i, &y) in targets.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / n as f32);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only report gradients of leaves the caller asked to differentiate.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, contrib: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, p) = dims(self.value(*a));
                let (_, n) = dims(self.value(*b));
                acc(*a, kernels::matmul_nt(g, self.value(*b).data(), m, n, p));
                acc(*b, kernels::matmul_tn(self.value(*a).data(), g, m, p, n));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(x, row) => {
                acc(*x, g.to_vec());
                let d = self.value(*row).numel();
                let mut gr = vec![0.0f32; d];
                for chunk in g.chunks_exact(d) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                acc(*row, gr);
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Transpose(x) => {
                let (r, c) = dims(self.value(*x));
                acc(*x, kernels::transpose(g, c, r));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, extent, inner) = split_axis(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0f32; self.value(*x).numel()];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, gx);
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in xs {
                    let ext = self.shape(*v)[*axis];
                    let mut gx = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gx.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    offset += ext;
                    acc(*v, gx);
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f32; n]);
            }
            Op::Abs(x) => acc(
                *x,
                self.value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(v, g)| sign(*v) * g)
                    .collect(),
            ),
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("softmax output has an axis");
                let mut gx = vec![0.0f32; y.len()];
                for ((yr, gr), out) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let mut gx = vec![0.0f32; xhat.len()];
                let mut gg = vec![0.0f32; d];
                let mut gb = vec![0.0f32; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0f32;
                    let mut mean_dh_h = 0.0f32;
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f32;
                    mean_dh_h /= d as f32;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Gelu(x) => acc(
                *x,
                self.value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(v, g)| kernels::gelu_grad(*v) * g)
                    .collect(),
            ),
            Op::L1Mean(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let scale = g[0] / va.len() as f32;
                let ga: Vec<f32> = va.iter().zip(vb).map(|(x, y)| sign(x - y) * scale).collect();
                let gb = ga.iter().map(|v| -v).collect();
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f32;
                let mut gx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in targets.iter().enumerate() {
                    gx[i * c + y] -= scale;
                }
                acc(*logits, gx);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: HashMap<String, Var>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when it was frozen or unreachable.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn by_name(&self, name: &str) -> Option<&[f32]> {
        self.params.get(name).and_then(|v| self.get(*v))
    }

    /// Named parameter gradients in name order.
    pub fn named(&self) -> Vec<(&str, &[f32])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2().expect("validated at record time")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f32, x: &Tensor, eps: f32) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2], vec![1000.0, 1000.0]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let z = tape.constant(Tensor::new([2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_lastdim(z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        let denom: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            let expect = ((i + 1) as f64).exp() / denom;
            assert!((*v as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(kernels::gelu(0.0), 0.0);
        assert!((kernels::gelu(10.0) - 10.0).abs() < 1e-4);
        let c = (2.0f64 / std::f64::consts::PI).sqrt();
        let exact = 0.5 * (1.0 + (c * (1.0 + 0.044715)).tanh());
        assert!((kernels::gelu(1.0) as f64 - exact).abs() < 1e-6);
        assert!((kernels::gelu(1.0) - 0.84119).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_statistics_and_constant_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0]).unwrap());
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::full([3], 0.25));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        let out = tape.value(y);
        let row = &out.data()[..3];
        let mean = row.iter().map(|v| v - 0.25).sum::<f32>() / 3.0;
        let var = row.iter().map(|v| (v - 0.25 - mean).powi(2)).sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
        assert_eq!(&out.data()[3..], &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn l1_loss_value_and_subgradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[&[1.0, 2.0]]).with_requires_grad(true));
        let b = tape.constant(t2(&[&[0.0, 4.0]]));
        let loss = tape.l1_mean_loss(a, b).unwrap();
        assert_eq!(tape.value(loss).item(), 1.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.5, -0.5]);

        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[&[1.0, 2.0]]).with_requires_grad(true));
        let b = tape.constant(t2(&[&[1.0, 2.0]]));
        let loss = tape.l1_mean_loss(a, b).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        assert_eq!(tape.backward(loss).unwrap().get(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros([2]).with_requires_grad(true));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_grad_is_ones_and_unused_inputs_get_none() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_fn([2, 3], |i| i as f32).with_requires_grad(true));
        let y = tape.leaf(&Tensor::zeros([4]).with_requires_grad(true));
        let frozen = tape.leaf(&Tensor::ones([2, 3]));
        let xy = tape.add(x, frozen).unwrap();
        let loss = tape.sum(xy);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
        assert!(g.get(y).is_none());
        assert!(g.get(frozen).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_fn([3], |i| i as f32).with_requires_grad(true));
        let xx = tape.add(x, x).unwrap();
        let loss = tape.sum(xx);
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn param_binding_is_shared_by_name() {
        let w = Tensor::ones([2]).with_requires_grad(true);
        let mut tape = Tape::new();
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.by_name("w").unwrap(), &[2.0, 2.0]);
        assert_eq!(g.named().len(), 1);
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let x = tape.leaf(&Tensor::ones([1]).with_requires_grad(true));
        let s = tape.sum(x);
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn transpose_is_an_involution_and_concat_slice_round_trip() {
        let a = Tensor::from_fn([3, 4], |i| (i as f32).sin());
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let t = tape.transpose(x).unwrap();
        let tt = tape.transpose(t).unwrap();
        assert!(tape.value(tt).bit_eq(&a));

        let b = Tensor::from_fn([3, 2], |i| i as f32 * 0.1);
        let y = tape.constant(b.clone());
        let c = tape.concat(&[x, y], 1).unwrap();
        assert_eq!(tape.shape(c), &[3, 6]);
        let s1 = tape.slice(c, 1, 0, 4).unwrap();
        let s2 = tape.slice(c, 1, 4, 2).unwrap();
        assert!(tape.value(s1).bit_eq(&a));
        assert!(tape.value(s2).bit_eq(&b));
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let x0 = Tensor::from_fn([3, 4], |i| (i as f32 * 0.9).sin());
        let targets = [1, 3, 0];
        let loss_of = |t: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.constant(t.clone());
            let l = tape.cross_entropy(x, &targets).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(&x0.clone().with_requires_grad(true));
        let l = tape.cross_entropy(x, &targets).unwrap();
        let g = tape.backward(l).unwrap();
        let fd = finite_diff_grad(loss_of, &x0, 1e-3);
        for (a, b) in g.get(x).unwrap().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn mean_of_four() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 2.5);
    }

    #[test]
    fn finite_diff_basics() {
        let x = Tensor::from_fn([5], |i| i as f32 - 2.0);
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-3);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
        let g = finite_diff_grad(|t| t.item() * t.item(), &Tensor::scalar(3.0), 1e-3);
        assert!((g.item() - 6.0).abs() < 1e-3);
    }
}
