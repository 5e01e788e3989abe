//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Every kernel here sums in a fixed order so results are bit-for-bit
//! repeatable for identical inputs.

use crate::error::{arg_err, dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(dim_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what} produced non-finite value {} at flat index {pos}",
                self.data[pos]
            )));
        }
        Ok(())
    }
}

/// `c (+)= op(a) * op(b)` for row-major matrices where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. The blocked kernel is deterministic for fixed shapes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    // a is m x k (stored k x m when a_trans), b is k x n (stored n x k when b_trans)
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // SAFETY: the slice lengths asserted above cover every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(dim_err!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_rows(data: &mut [f64], width: usize, valid: Option<&[bool]>) {
    for (r, row) in data.chunks_mut(width).enumerate() {
        let mask = valid.map(|v| &v[r * width..(r + 1) * width]);
        let is_valid = |j: usize| mask.is_none_or(|m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if is_valid(j) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if is_valid(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let width = *x
        .shape
        .last()
        .ok_or_else(|| dim_err!("softmax on a rank-0 tensor"))?;
    if width == 0 {
        return Err(dim_err!("softmax over an empty last axis"));
    }
    let mut out = x.clone();
    softmax_rows(&mut out.data, width, None);
    out.ensure_finite("softmax")?;
    Ok(out)
}

fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    if axes.len() != rank {
        return Err(arg_err!(
            "permutation {axes:?} has length {} but tensor rank is {rank}",
            axes.len()
        ));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(arg_err!("{axes:?} is not a permutation of 0..{rank}"));
        }
        seen[a] = true;
    }
    Ok(())
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    check_permutation(axes, x.rank())?;
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let in_strides = strides(&x.shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = x.numel();
    let mut out = Vec::with_capacity(numel);
    let rank = out_shape.len();
    if rank == 0 {
        return Ok(x.clone());
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(x.data[src]);
        // odometer increment over the output index
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
