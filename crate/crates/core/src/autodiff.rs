//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse
//! and accumulates `∂loss/∂node` into every node that requires a gradient.
//!
//! Only the operation set needed by the encoders, the attention decoder and the
//! loss is supported. Broadcasting is limited to a `1×n` row added to an `m×n`
//! matrix.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Lower clamp applied to the argument of [`Graph::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in a gather map meaning "emit zero".
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
    MeanAxis(Var, usize),
    Sum(Var),
    SoftmaxRows(Var),
    Gather(Var, Arc<[u32]>),
    Reshape(Var),
    #[cfg(test)]
    FaultyRelu(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Leaves may borrow their values, so parameters are
/// never copied into the tape.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into (outer, axis extent, inner) around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), rg, op)
    }

    /// A leaf holding an owned value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), requires_grad, Op::Leaf)
    }

    /// A leaf that borrows its value, typically a model parameter.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor, zero-filled when nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Clears all gradients so [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        self.derived(out, &[x], op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        self.derived(out, &[a, b], op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, p) = self.value(b).dims2()?;
        if self.value(a).rank() != 2 || self.value(b).rank() != 2 || k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * p];
        kernels::gemm(m, k, p, self.data(a), false, self.data(b), false, &mut out, 0.0);
        Ok(self.derived(Tensor::new(&[m, p], out)?, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::contract(format!("transpose needs a matrix, got {:?}", t.shape())));
        }
        let (r, c) = t.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        Ok(self.derived(Tensor::new(&[c, r], out)?, &[x], Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        Ok(self.zip(a, b, Op::Hadamard(a, b), |x, y| x * y))
    }

    /// Adds a `1×n` (or length-`n`) row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(x).rank() != 2 || self.value(row).len() != n || self.value(row).dims2()?.0 != 1 {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row);
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.derived(out, &[x, row], Op::AddRow(x, row)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Natural log with the argument clamped to `[LOG_FLOOR, ∞)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.max(LOG_FLOOR).ln())
    }

    /// Elementwise `x^p`. Inputs are expected to be nonnegative.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Pow(x, p), |v| v.powf(p))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Concatenates along the last axis. All leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat", self.shape(first), s));
            }
        }
        let outer: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        Ok(self.derived(out, parts, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap();
        if len == 0 || start + len > w {
            return Err(Error::contract(format!("slice {start}..{} out of range for width {w}", start + len)));
        }
        let data = self
            .data(x)
            .chunks_exact(w)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.derived(out, &[x], Op::SliceLast(x, start)))
    }

    /// Mean over `axis`; the axis is kept with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for a in 0..n {
                let base = (o * n + a) * inner;
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d /= n as f64);
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.derived(out, &[x], Op::MeanAxis(x, axis)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.derived(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::contract(format!("softmax_rows needs a matrix, got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        let (r, c) = t.dims2()?;
        let mut data = Vec::with_capacity(r * c);
        for row in t.data().chunks_exact(c) {
            data.extend(softmax(row));
        }
        let out = Tensor::new(&[r, c], data)?;
        Ok(self.derived(out, &[x], Op::SoftmaxRows(x)))
    }

    /// `out[j] = x.flat[map[j]]`, or zero where `map[j] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, map: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != map.len() {
            return Err(Error::dim("gather", shape, &[map.len()]));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(map.len());
        for &i in map.iter() {
            data.push(if i == GATHER_ZERO {
                0.0
            } else {
                *src.get(i as usize).ok_or_else(|| Error::contract(format!("gather index {i} out of range")))?
            });
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, &[x], Op::Gather(x, map)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(out, &[x], Op::Reshape(x)))
    }

    #[cfg(test)]
    pub(crate) fn faulty_relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::FaultyRelu(x), |v| v.max(0.0))
    }

    /// Propagates `∂loss/∂·` to every node that requires a gradient.
    ///
    /// `loss` must be a one-element tensor. Calling this twice without
    /// [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::contract("backward already ran on this graph; call reset_grads first"));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds the contribution of node `i` (with upstream gradient `g`) to its inputs.
    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let out = nodes[i].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let p = shape(b)[1];
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(a, &mut |ga| kernels::gemm(m, p, k, g, false, val(b), true, ga, 1.0));
                acc(b, &mut |gb| kernels::gemm(k, m, p, val(a), true, g, false, gb, 1.0));
            }
            &Op::Transpose(x) => {
                let (r, c) = (shape(x)[0], shape(x)[1]);
                acc(x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            &Op::AddRow(x, row) => {
                acc(x, &mut |gx| add_into(gx, g));
                let n = nodes[row.0].value.len();
                acc(row, &mut |gr| {
                    for gr_row in g.chunks_exact(n) {
                        add_into(gr, gr_row);
                    }
                });
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => acc(x, &mut |gx| add_into(gx, g)),
            &Op::Scale(x, c) => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            &Op::Hadamard(a, b) => {
                acc(a, &mut |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += s * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(val(a)) {
                        *d += s * x;
                    }
                });
            }
            &Op::Relu(x) => acc(x, &mut |gx| {
                for ((d, s), v) in gx.iter_mut().zip(g).zip(val(x)) {
                    if *v > 0.0 {
                        *d += s;
                    }
                }
            }),
            #[cfg(test)]
            &Op::FaultyRelu(x) => acc(x, &mut |gx| {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }),
            &Op::Sigmoid(x) => acc(x, &mut |gx| {
                for ((d, s), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += s * y * (1.0 - y);
                }
            }),
            &Op::Log(x) => acc(x, &mut |gx| {
                for ((d, s), v) in gx.iter_mut().zip(g).zip(val(x)) {
                    if *v > LOG_FLOOR {
                        *d += s / v;
                    }
                }
            }),
            &Op::Pow(x, p) => acc(x, &mut |gx| {
                for ((d, s), v) in gx.iter_mut().zip(g).zip(val(x)) {
                    if *v != 0.0 || p >= 1.0 {
                        let dv = if p == 1.0 { 1.0 } else { p * v.powf(p - 1.0) };
                        *d += s * dv;
                    }
                }
            }),
            &Op::Clamp(x, lo, hi) => acc(x, &mut |gx| {
                for ((d, s), v) in gx.iter_mut().zip(g).zip(val(x)) {
                    if (lo..=hi).contains(v) {
                        *d += s;
                    }
                }
            }),
            Op::Concat(parts) => {
                let total = *shape(Var(i)).last().unwrap();
                let outer = out.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = *shape(p).last().unwrap();
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            add_into(&mut gp[o * w..(o + 1) * w], &g[o * total + off..o * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            &Op::SliceLast(x, start) => {
                let w = *shape(x).last().unwrap();
                let len = *shape(Var(i)).last().unwrap();
                acc(x, &mut |gx| {
                    for (gr, sr) in gx.chunks_exact_mut(w).zip(g.chunks_exact(len)) {
                        add_into(&mut gr[start..start + len], sr);
                    }
                });
            }
            &Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = axis_split(shape(x), axis);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..n {
                            let base = (o * n + a) * inner;
                            for (d, s) in gx[base..base + inner].iter_mut().zip(src) {
                                *d += s / n as f64;
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            &Op::SoftmaxRows(x) => {
                let c = shape(x)[1];
                acc(x, &mut |gx| {
                    for ((d, s), y) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)) {
                        let dot: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((dd, ss), yy) in d.iter_mut().zip(s).zip(y) {
                            *dd += yy * (ss - dot);
                        }
                    }
                });
            }
            Op::Gather(x, map) => acc(*x, &mut |gx| {
                for (&j, s) in map.iter().zip(g) {
                    if j != GATHER_ZERO {
                        gx[j as usize] += s;
                    }
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::from_rows(&[[3.0, 3.0, 3.0], [0.0, 2f64.ln(), f64::NEG_INFINITY.max(-1e300)]]).unwrap(),
        );
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s);
        assert!(approx(v.row(0), &[1.0 / 3.0; 3], 1e-15));
        assert!(approx(&v.row(1)[..2], &[1.0 / 3.0, 2.0 / 3.0], 1e-15));

        let a = softmax(&[1000.0, 1000.5]);
        let b = softmax(&[0.0, 0.5]);
        assert!(approx(&a, &b, 1e-12));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[0.0, f64::NAN]]).unwrap());
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);

        let a = g.constant(Tensor::zeros(&[4, 256]));
        let b = g.constant(Tensor::zeros(&[4, 256]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[4, 512]);

        let bad = g.constant(Tensor::zeros(&[3, 256]));
        assert!(g.concat(&[a, bad]).is_err());
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn log_is_clamped() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let l = g.log(x);
        assert_eq!(g.value(l).data(), &[LOG_FLOOR.ln(), 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 3], vec![0.5; 6]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let sq = g.hadamard(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_contributions_are_summed() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s1 = g.sum(x);
        let sq = g.hadamard(x, x).unwrap();
        let s2 = g.sum(sq);
        let l = g.add(s1, s2).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let w = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let x = g.param(&w, false);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let x = Tensor::new(&[4], vec![-1.0, -0.5, 0.3, 2.0]).unwrap();
        let good = grad_check(
            |g, v| {
                let r = g.relu(v);
                Ok(g.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        let bad = grad_check(
            |g, v| {
                let r = g.faulty_relu(v);
                Ok(g.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(good < 1e-8);
        assert!(bad > 0.5);
    }
}
