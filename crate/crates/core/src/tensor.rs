//! Dense row-major `f32` tensors.
//!
//! A [`Tensor`] is plain storage: shape, values, a `requires_grad` flag and an
//! optional gradient buffer of the same shape. Differentiable arithmetic lives
//! on [`crate::autodiff::Tape`]; the kernels at the bottom of this file are the
//! shared numeric core of both the forward and backward passes.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Tensor::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", &self.shape, &[])),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("row() on a scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Shape and bit-pattern equality; gradient state is ignored.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) mod kernels {
    /// `c[m×n] = a[m×p] · b[p×n]`
    pub fn matmul(a: &[f32], b: &[f32], m: usize, p: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for k in 0..p {
                let av = a[i * p + k];
                let brow = &b[k * n..(k + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        c
    }

    /// `c[m×n] = a[m×p] · b[n×p]ᵀ`
    pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, p: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &a[i * p..(i + 1) * p];
            for j in 0..n {
                let brow = &b[j * p..(j + 1) * p];
                c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        c
    }

    /// `c[m×n] = a[p×m]ᵀ · b[p×n]`
    pub fn matmul_tn(a: &[f32], b: &[f32], p: usize, m: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for k in 0..p {
            let brow = &b[k * n..(k + 1) * n];
            for i in 0..m {
                let av = a[k * m + i];
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        c
    }

    pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = a[i * cols + j];
            }
        }
        out
    }

    pub fn softmax_rows(x: &[f32], n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; x.len()];
        for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            let inv = 1.0 / sum;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        out
    }

    pub const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
    pub const GELU_K: f32 = 0.044_715;

    pub fn gelu(x: f32) -> f32 {
        0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f32) -> f32 {
        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new([2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros([2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn kernel_variants_agree() {
        let a: Vec<f32> = (0..6).map(|i| i as f32 - 2.0).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|i| (i as f32) * 0.5).collect(); // 3x4
        let c = kernels::matmul(&a, &b, 2, 3, 4);
        let bt = kernels::transpose(&b, 3, 4);
        assert_eq!(c, kernels::matmul_nt(&a, &bt, 2, 3, 4));
        let at = kernels::transpose(&a, 2, 3);
        assert_eq!(c, kernels::matmul_tn(&at, &b, 3, 2, 4));
    }
}
