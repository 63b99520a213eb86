//! Reverse-mode tape. Each forward pass owns one `Tape`; values are
//! immutable once recorded and `backward` never mutates the tape, so
//! repeated backward passes from the same state are bitwise identical.

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nt, gemm_tn};
use crate::ops::{self, Index};
use crate::tensor::{numel, split_axis, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Exp(Var),
    MatMul(Var, Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Gather(Var, usize, Index),
    Expand(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = ops::scale(self.value(a), s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = ops::map(self.value(a), f32::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::log_softmax(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (out, stats) =
            ops::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean: stats.mean,
            rstd: stats.rstd,
        };
        Ok(self.push(out, op, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(x), axes)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if d0.max(d1) >= rank {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: d0.max(d1),
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(d0, d1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&values, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn gather(&mut self, x: Var, axis: usize, index: &Index) -> Result<Var> {
        let out = ops::gather(self.value(x), axis, index)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather(x, axis, index.clone()), rg))
    }

    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = ops::expand(self.value(x), shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Expand(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = ops::sum(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Reverse sweep from a scalar `loss`. Every trainable leaf receives a
    /// gradient, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut work: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = work[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    out[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(g);
                continue;
            }
            self.adjoint(i, &g, &mut work)?;
        }
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, work: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut work[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn adjoint(&self, i: usize, g: &Tensor, work: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(work, *a, ops::reduce_to(g, self.shape(*a)));
                self.accumulate(work, *b, ops::reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(work, *a, ops::reduce_to(g, self.shape(*a)));
                let neg = ops::scale(g, -1.0);
                self.accumulate(work, *b, ops::reduce_to(&neg, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = ops::mul(g, self.value(*b))?;
                    self.accumulate(work, *a, ops::reduce_to(&ga, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let gb = ops::mul(g, self.value(*a))?;
                    self.accumulate(work, *b, ops::reduce_to(&gb, self.shape(*b)));
                }
            }
            Op::Scale(a, s) => self.accumulate(work, *a, ops::scale(g, *s)),
            Op::Exp(a) => self.accumulate(work, *a, ops::mul(g, y)?),
            Op::MatMul(a, b) => self.matmul_adjoint(*a, *b, g, work)?,
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut dx = vec![0.0f32; y.numel()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + k;
                        let dotp: f64 = (0..len).map(|j| yd[at(j)] as f64 * gd[at(j)] as f64).sum();
                        for j in 0..len {
                            dx[at(j)] = (yd[at(j)] as f64 * (gd[at(j)] as f64 - dotp)) as f32;
                        }
                    }
                }
                self.accumulate(work, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LogSoftmax(x) => {
                let len = *y.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0f32; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(len).zip(g.data().chunks(len)).zip(dx.chunks_mut(len)) {
                    let gsum: f64 = gr.iter().map(|&v| v as f64).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gv as f64 - (yv as f64).exp() * gsum) as f32;
                    }
                }
                self.accumulate(work, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let mut dx = vec![0.0f32; xv.numel()];
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                for r in 0..xv.numel() / d.max(1) {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r] as f64, rstd[r] as f64);
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for j in 0..d {
                        let xhat = (xr[j] as f64 - mu) * rs;
                        let dxhat = gr[j] as f64 * gam[j] as f64;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += gr[j] as f64 * xhat;
                        dbeta[j] += gr[j] as f64;
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (xr[j] as f64 - mu) * rs;
                        let dxhat = gr[j] as f64 * gam[j] as f64;
                        dx[r * d + j] =
                            (rs * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d)) as f32;
                    }
                }
                let to_f32 = |v: Vec<f64>| Tensor::new(vec![d], v.into_iter().map(|x| x as f32).collect());
                self.accumulate(work, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                self.accumulate(work, *gamma, to_f32(dgamma)?);
                self.accumulate(work, *beta, to_f32(dbeta)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = xv.data().iter().zip(g.data()).map(|(&v, &gv)| gv * ops::gelu_grad(v)).collect();
                self.accumulate(work, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Permute(x, axes) => {
                let back = ops::permute(g, &ops::inverse_permutation(axes))?;
                self.accumulate(work, *x, back);
            }
            Op::Reshape(x) => {
                let back = g.clone().reshape(self.shape(*x).to_vec())?;
                self.accumulate(work, *x, back);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut buf = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            buf.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        self.accumulate(work, p, Tensor::new(self.shape(p).to_vec(), buf)?);
                    }
                    start += ext;
                }
            }
            Op::Gather(x, axis, index) => {
                let shape = self.shape(*x).to_vec();
                let (offsets, _, inner) = ops::gather_offsets(&shape, *axis, index)?;
                let mut dx = vec![0.0f32; numel(&shape)];
                for (slot, off) in offsets.into_iter().enumerate() {
                    let src = &g.data()[slot * inner..(slot + 1) * inner];
                    for (d, &s) in dx[off..off + inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(work, *x, Tensor::new(shape, dx)?);
            }
            Op::Expand(x) => {
                self.accumulate(work, *x, ops::reduce_to(g, self.shape(*x)));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(work, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
        }
        Ok(())
    }

    fn matmul_adjoint(&self, a: Var, b: Var, g: &Tensor, work: &mut [Option<Tensor>]) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = ops::matmul_plan(av.shape(), bv.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if self.requires_grad(a) {
            let mut da = vec![0.0f32; av.numel()];
            if bv.rank() == 2 {
                gemm_nt(av.numel() / k.max(1), n, k, g.data(), bv.data(), &mut da);
            } else {
                for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[ib * k * n..(ib + 1) * k * n],
                        &mut da[ia * m * k..(ia + 1) * m * k],
                    );
                }
            }
            self.accumulate(work, a, Tensor::new(av.shape().to_vec(), da)?);
        }
        if self.requires_grad(b) {
            let mut db = vec![0.0f32; bv.numel()];
            if bv.rank() == 2 {
                gemm_tn(k, av.numel() / k.max(1), n, av.data(), g.data(), &mut db);
            } else {
                for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    gemm_tn(
                        k,
                        m,
                        n,
                        &av.data()[ia * m * k..(ia + 1) * m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &mut db[ib * k * n..(ib + 1) * k * n],
                    );
                }
            }
            self.accumulate(work, b, Tensor::new(bv.shape().to_vec(), db)?);
        }
        Ok(())
    }
}
