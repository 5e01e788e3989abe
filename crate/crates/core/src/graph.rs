//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is always a valid
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{arg_err, dim_err, Result};
use crate::tensor::{gemm, inverse_permutation, permute, softmax_rows, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row index used by [`Graph::gather_rows`] to emit an all-zero row.
pub const ZERO_ROW: u32 = u32::MAX;

/// Key validity for masked softmax over attention scores laid out as
/// `[windows, heads, queries, keys]`. The mask itself is `[windows, queries, keys]`
/// and is shared by every head.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub windows: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub valid: Vec<bool>,
}

impl AttentionMask {
    fn expand(&self) -> Vec<bool> {
        let per_window = self.queries * self.keys;
        let mut out = Vec::with_capacity(self.windows * self.heads * per_window);
        for w in 0..self.windows {
            let src = &self.valid[w * per_window..(w + 1) * per_window];
            for _ in 0..self.heads {
                out.extend_from_slice(src);
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Hinge(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Arc<Vec<u32>>),
    Stack(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Number of tape nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "input")
    }

    /// Trainable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        let v = self.push(t, Op::Leaf, "param")?;
        let node = &mut self.nodes[v.0];
        node.trainable = true;
        node.requires_grad = true;
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.macs += (m * k * n) as u64;
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("bmm of {:?} and {:?}", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err!("bmm inner extents differ: {k} vs {kb}"));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            "bmm",
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err!("cannot broadcast {:?} onto {:?}", sb, sa));
        }
        let tb = self.value(b).data();
        let width = tb.len().max(1);
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(width) {
            for (o, &v) in chunk.iter_mut().zip(tb) {
                *o += v;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, Op::AddBroadcast(a, b), "add_broadcast")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.map(a, |x| x * factor)?;
        self.push(t, Op::Scale(a, factor), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x + c)?;
        self.push(t, Op::AddScalar(a), "add_scalar")
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, gelu)?;
        self.push(t, Op::Gelu(a), "gelu")
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.max(0.0))?;
        self.push(t, Op::Hinge(a), "hinge")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::abs)?;
        self.push(t, Op::Abs(a), "abs")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| dim_err!("layer_norm on scalar"))?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(dim_err!(
                "layer_norm affine shapes {:?}/{:?} for width {width}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / width.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..width {
                let h = (row[j] - mean) * is;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis. Masked entries get probability exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| dim_err!("softmax on scalar"))?;
        if width == 0 {
            return Err(dim_err!("softmax over an empty last axis"));
        }
        let valid = match mask {
            Some(m) => {
                let expected = [m.windows * m.heads, m.queries, m.keys];
                let flat: [usize; 3] = match shape.as_slice() {
                    [a, b, c] => [*a, *b, *c],
                    [a, b, c, d] => [a * b, *c, *d],
                    _ => return Err(dim_err!("masked softmax on shape {:?}", shape)),
                };
                if flat != expected {
                    return Err(dim_err!(
                        "mask {:?} does not fit scores {:?}",
                        expected,
                        shape
                    ));
                }
                Some(m.expand())
            }
            None => None,
        };
        let mut data = self.value(x).data().to_vec();
        softmax_rows(&mut data, width, valid.as_deref());
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = permute(self.value(a), axes)?;
        self.push(t, Op::Permute(a, axes.to_vec()), "permute")
    }

    /// Selects rows (slices along axis 0) by index; [`ZERO_ROW`] yields zeros.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<u32>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(dim_err!("gather_rows on scalar"));
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; index.len() * width];
        for (o, &r) in index.iter().enumerate() {
            if r == ZERO_ROW {
                continue;
            }
            let r = r as usize;
            if r >= rows {
                return Err(arg_err!("gather index {r} out of range for {rows} rows"));
            }
            out[o * width..(o + 1) * width].copy_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::GatherRows(a, index), "gather_rows")
    }

    /// Stacks same-shape values along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars.first().ok_or_else(|| arg_err!("stack of nothing"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(vars.len() * self.value(*first).numel());
        for v in vars {
            if self.shape(*v) != inner.as_slice() {
                return Err(dim_err!("stack of {:?} and {:?}", inner, self.shape(*v)));
            }
            data.extend_from_slice(self.value(*v).data());
        }
        let mut shape = vec![vars.len()];
        shape.extend_from_slice(&inner);
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Stack(vars.to_vec()), "stack")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(dim_err!("mean of empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = HashMap::new();
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            let node = &self.nodes[i];
            if node.trainable {
                out.insert(Var(i), g);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.trainable {
                out.entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            grads: out,
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                let gd = g.data();
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                        // dA = dC * op(B)^T
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            bi,
                            !*trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dC^T * A
                            gemm(n, m, k, gi, true, ai, false, dst, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, false);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect())?;
                self.accumulate(grads, *b, neg);
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
            }
            Op::AddBroadcast(a, b) => {
                if self.nodes[b.0].requires_grad {
                    let sb = self.shape(*b).to_vec();
                    let width = sb.iter().product::<usize>().max(1);
                    let mut gb = vec![0.0; width];
                    for chunk in g.data().chunks(width) {
                        for (o, v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(sb, gb)?);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, f) => {
                let t = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * f).collect())?;
                self.accumulate(grads, *a, t);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.into_reshaped(&shape)?);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Hinge(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| {
                        if xv > 0.0 {
                            *gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let width = *out.shape().last().unwrap_or(&1);
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![0.0; width];
                let mut dbeta = vec![0.0; width];
                let mut dx = vec![0.0; gd.len()];
                let nf = width as f64;
                for (r, &is) in inv_std.iter().enumerate() {
                    let range = r * width..(r + 1) * width;
                    let (gr, hr) = (&gd[range.clone()], &xhat[range.clone()]);
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..width {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        sum_d += dh;
                        sum_dh += dh * hr[j];
                    }
                    let dxr = &mut dx[range];
                    for j in 0..width {
                        let dh = gr[j] * gam[j];
                        dxr[j] = is / nf * (nf * dh - sum_d - hr[j] * sum_dh);
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![width], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![width], dbeta)?);
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Softmax(x) => {
                let width = *out.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; g.numel()];
                for ((p, gr), dr) in out
                    .data()
                    .chunks(width)
                    .zip(g.data().chunks(width))
                    .zip(dx.chunks_mut(width))
                {
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        dr[j] = p[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Permute(a, axes) => {
                let back = permute(&g, &inverse_permutation(axes))?;
                self.accumulate(grads, *a, back);
            }
            Op::GatherRows(a, index) => {
                let shape = self.shape(*a).to_vec();
                let width: usize = shape[1..].iter().product();
                let mut ga = vec![0.0; shape.iter().product()];
                for (o, &r) in index.iter().enumerate() {
                    if r == ZERO_ROW {
                        continue;
                    }
                    let r = r as usize;
                    let dst = &mut ga[r * width..(r + 1) * width];
                    for (d, s) in dst.iter_mut().zip(&g.data()[o * width..(o + 1) * width]) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape, ga)?);
            }
            Op::Stack(vars) => {
                let per = g.numel() / vars.len();
                for (i, v) in vars.iter().enumerate() {
                    let shape = self.shape(*v).to_vec();
                    let part = g.data()[i * per..(i + 1) * per].to_vec();
                    self.accumulate(grads, *v, Tensor::new(shape, part)?);
                }
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let gv = g.item()? / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
        }
        Ok(())
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Gelu(a)
            | Op::Hinge(a)
            | Op::Abs(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Softmax(x) => vec![*x],
            Op::Stack(v) => v.clone(),
        }
    }
}
