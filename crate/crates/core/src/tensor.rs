//! Dense row-major `f64` tensors and the scalar kernels shared by the graph.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A dense row-major tensor of 64-bit reals.
///
/// Every tensor is viewed as a matrix of `rows() x cols()`, where `cols()` is
/// the last axis and `rows()` the product of the leading axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Validation(format!(
                "tensor shape must be non-empty with positive axes, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("filled: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![value]).expect("scalar")
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(&[n], data)
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Validation("ragged rows".into()));
        }
        Tensor::new(&[r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn is_trainable(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable logistic function; saturates to exactly 0 or 1.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Softmax over the entries where `allowed` is set, writing zeros elsewhere.
///
/// Excluding masked entries from both the max and the normaliser is exactly
/// what an additive `-1e9` bias produces once `exp` underflows, without the
/// bias ever touching the arithmetic. Returns `false` when no entry is
/// allowed, in which case `out` is all zeros.
pub(crate) fn softmax_allowed(scores: &[f64], allowed: &[bool], out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (s, &a) in scores.iter().zip(allowed) {
        if a && *s > max {
            max = *s;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for ((o, s), &a) in out.iter_mut().zip(scores).zip(allowed) {
        *o = if a { (s - max).exp() } else { 0.0 };
        sum += *o;
    }
    for (o, &a) in out.iter_mut().zip(allowed) {
        if a {
            *o /= sum;
        }
    }
    true
}

/// Converts a 0/1 mask to booleans, rejecting any other value.
pub fn binary_mask(mask: &[f64]) -> Result<Vec<bool>> {
    mask.iter()
        .enumerate()
        .map(|(i, &m)| {
            if m == 0.0 {
                Ok(false)
            } else if m == 1.0 {
                Ok(true)
            } else {
                Err(Error::Validation(format!(
                    "mask entry {i} is {m}, expected 0 or 1"
                )))
            }
        })
        .collect()
}

/// Masked softmax of a single score vector.
///
/// Masked entries are exactly zero; a fully masked vector yields all zeros.
pub fn masked_softmax(scores: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::shape(
            "masked_softmax",
            &[scores.len()],
            &[mask.len()],
        ));
    }
    let allowed = binary_mask(mask)?;
    let mut out = vec![0.0; scores.len()];
    softmax_allowed(scores, &allowed, &mut out);
    Ok(out)
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where the
/// strides select transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the debug assertions above state the extents dgemm reads; every
    // caller derives m, k, n and the strides from the operand shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
