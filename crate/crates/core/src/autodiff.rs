//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive in execution order, so node indices are
//! already a topological order; [`Tape::backward`] walks them once in reverse.
//! Tapes are rebuilt for every forward pass and dropped afterwards.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Log(Var, f64),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            bail!(Contract, "variable {} does not belong to this tape", v.0);
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient (data, weights, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a row vector `b` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).add_row(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        Ok(self.push(out, Op::AddScalar(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).relu();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    /// Natural log with inputs clamped below at `floor`; the clamped region
    /// has zero gradient.
    pub fn log(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| libm::log(if v > floor { v } else { floor }));
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a, floor), rg))
    }

    /// Absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(libm::fabs);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Abs(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).softmax_rows()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Picks `a[i, index[i]]` from an `n×k` matrix, giving a length-`n` vector.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let [n, k] = *x.shape() else {
            bail!(Dimension, "gather expects a matrix, got {:?}", x.shape());
        };
        if index.len() != n {
            bail!(Dimension, "gather: {} indices for {} rows", index.len(), n);
        }
        let mut out = Vec::with_capacity(n);
        for (i, &j) in index.iter().enumerate() {
            if j >= k {
                bail!(Data, "gather: index {} out of range for {} columns", j, k);
            }
            out.push(x.data()[i * k + j]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Gather(a, index.to_vec()), rg))
    }

    /// Reverse pass from a scalar. Gradients accumulate across calls until
    /// [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                send(*a, &mut |da| {
                    // dA += dC · Bᵀ
                    let bt = bv.transpose().expect("matrix");
                    matmul_into(g, bt.data(), da, m, n, k);
                });
                send(*b, &mut |db| {
                    // dB += Aᵀ · dC
                    let at = av.transpose().expect("matrix");
                    matmul_into(at.data(), g, db, k, m, n);
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(*a, &mut |d| {
                    for ((x, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                send(*b, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(a, b) => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let c = self.value(*b).len();
                send(*b, &mut |d| {
                    for chunk in g.chunks(c) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) => send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                send(*a, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Log(a, floor) => {
                let av = self.value(*a).data();
                send(*a, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        if *ai > *floor {
                            *x += gi / ai;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                send(*a, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        if *ai > 0.0 {
                            *x += gi;
                        } else if *ai < 0.0 {
                            *x -= gi;
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                send(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let k = node.value.cols();
                send(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((x, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Gather(a, index) => {
                let k = self.value(*a).cols();
                send(*a, &mut |d| {
                    for (i, (&j, gi)) in index.iter().zip(g).enumerate() {
                        d[i * k + j] += gi;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_gradient_is_one() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.5));
        t.backward(x).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn square_at_three() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
        t.zero_grads();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(alloc::vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(alloc::vec![-2.0, 0.0, 3.0]));
        let a = t.abs(x).unwrap();
        let s = t.sum(a).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(alloc::vec![1.0, 2.0]));
        let x = t.param(Tensor::vector(alloc::vec![3.0, 4.0]));
        let p = t.mul(c, x).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(alloc::vec![2, 3]));
        assert!(matches!(t.gather(x, &[0, 3]), Err(crate::Error::Data(_))));
        assert!(matches!(t.gather(x, &[0]), Err(crate::Error::Dimension(_))));
    }
}
