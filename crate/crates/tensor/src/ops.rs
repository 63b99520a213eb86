//! Forward kernels on plain tensors. The tape calls these and records
//! enough to run the matching adjoints; they are also usable directly for
//! gradient-free work such as mask construction.

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, sum_f64};
use crate::tensor::{numel, split_axis, Tensor};

/// Integer index array used by [`gather`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Index {
    shape: Vec<usize>,
    data: Vec<usize>,
}

impl Index {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<usize>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional index shared by every outer position.
    pub fn vector(data: Vec<usize>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-wise index from equal-length rows, shape `[rows, k]`.
    pub fn rows(rows: &[Vec<usize>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(TensorError::Invalid {
                op: "index",
                msg: "rows have different lengths".into(),
            });
        }
        Ok(Self {
            shape: vec![rows.len(), k],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every element of `out_shape`, the flat offset of the source element
/// in a tensor of `in_shape` broadcast to it.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// How `b` lines up against `out` for a cheap elementwise loop.
enum Layout {
    Same,
    /// `b` repeats every `period` elements of `out` (b is a trailing block).
    Tiled(usize),
    General(Vec<usize>),
}

fn layout(out: &[usize], src: &[usize]) -> Layout {
    if out == src {
        return Layout::Same;
    }
    let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return Layout::Tiled(numel(&trimmed));
    }
    Layout::General(broadcast_map(out, src))
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n = numel(&shape);
    let fetch = |t: &Tensor| -> Vec<f32> {
        match layout(&shape, t.shape()) {
            Layout::Same => t.data().to_vec(),
            Layout::Tiled(p) => (0..n).map(|i| t.data()[i % p]).collect(),
            Layout::General(map) => map.iter().map(|&o| t.data()[o]).collect(),
        }
    };
    let out = match (layout(&shape, a.shape()), layout(&shape, b.shape())) {
        (Layout::Same, Layout::Same) => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Tiled(p)) => {
            let mut out = Vec::with_capacity(n);
            for chunk in a.data().chunks(p) {
                out.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        _ => {
            let xa = fetch(a);
            let xb = fetch(b);
            xa.iter().zip(&xb).map(|(&x, &y)| f(x, y)).collect()
        }
    };
    Tensor::new(shape, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    map(a, |x| x * s)
}

pub fn map(a: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
        .expect("map preserves shape")
}

/// Broadcasts `a` up to `shape`.
pub fn expand(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let out = broadcast_shape("expand", a.shape(), shape)?;
    if out != shape {
        return Err(TensorError::ShapeMismatch {
            op: "expand",
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let data = match layout(shape, a.shape()) {
        Layout::Same => a.data().to_vec(),
        Layout::Tiled(p) => {
            let n = numel(shape);
            (0..n).map(|i| a.data()[i % p]).collect()
        }
        Layout::General(map) => map.iter().map(|&o| a.data()[o]).collect(),
    };
    Tensor::new(shape.to_vec(), data)
}

/// Sums `g` (shaped like a broadcast result) back down to `shape`.
pub fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut acc = vec![0.0f64; numel(shape)];
    match layout(g.shape(), shape) {
        Layout::Same => unreachable!(),
        Layout::Tiled(p) => {
            for chunk in g.data().chunks(p) {
                for (a, &v) in acc.iter_mut().zip(chunk) {
                    *a += v as f64;
                }
            }
        }
        Layout::General(map) => {
            for (&o, &v) in map.iter().zip(g.data()) {
                acc[o] += v as f64;
            }
        }
    }
    Tensor::new(shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
        .expect("reduce_to shape")
}

pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (batch offset into a, batch offset into b) per output batch.
    pub pairs: Vec<(usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shape("matmul", ba, bb).map_err(|_| mismatch())?;
    let map_a = broadcast_map(&batch, ba);
    let map_b = broadcast_map(&batch, bb);
    let pairs = map_a.into_iter().zip(map_b).collect();
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
    })
}

/// Batched matrix product `a[..,m,k] · b[..,k,n]` with broadcast batch dims.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0f32; numel(&plan.out_shape)];
    if b.rank() == 2 {
        // every batch shares b, so fold the batch into rows
        gemm_nn(a.numel() / k.max(1), k, n, a.data(), b.data(), &mut out);
    } else {
        for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
            gemm_nn(
                m,
                k,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                &b.data()[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }
    Tensor::new(plan.out_shape, out)
}

fn check_axis(op: &'static str, t: &[usize], axis: usize) -> Result<()> {
    if axis >= t.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: t.len(),
        });
    }
    Ok(())
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x.shape(), axis)?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    if inner == 1 {
        for (row, dst) in src.chunks(len.max(1)).zip(out.chunks_mut(len.max(1))) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for (d, &v) in dst.iter_mut().zip(row) {
                let e = (v - max).exp();
                *d = e;
                denom += e as f64;
            }
            let inv = (1.0 / denom) as f32;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        return Tensor::new(x.shape().to_vec(), out);
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                denom += e as f64;
            }
            let inv = (1.0 / denom) as f32;
            for j in 0..len {
                out[at(j)] *= inv;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `log(softmax(x))` along the last axis.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let axis = x.rank().checked_sub(1).ok_or(TensorError::InvalidAxis {
        op: "log_softmax",
        axis: 0,
        rank: 0,
    })?;
    let len = x.shape()[axis];
    let mut out = vec![0.0f32; x.numel()];
    for (row, dst) in x.data().chunks(len.max(1)).zip(out.chunks_mut(len.max(1))) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v as f64 - lse) as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) struct LayerNormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, LayerNormStats)> {
    let d = *x.shape().last().ok_or(TensorError::InvalidAxis {
        op: "layer_norm",
        axis: 0,
        rank: 0,
    })?;
    for p in [gamma, beta] {
        if p.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let rows = x.numel() / d.max(1);
    let mut out = vec![0.0f32; x.numel()];
    let mut stats = LayerNormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = sum_f64(row) / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps as f64).sqrt();
        for (j, (o, &v)) in dst.iter_mut().zip(row).enumerate() {
            let xhat = ((v as f64 - mean) * rstd) as f32;
            *o = xhat * gamma.data()[j] + beta.data()[j];
        }
        stats.mean.push(mean as f32);
        stats.rstd.push(rstd as f32);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, stats))
}

const INV_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    map(x, |v| 0.5 * v * (1.0 + libm::erff(v * INV_SQRT_2)))
}

pub(crate) fn gelu_grad(v: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(v * INV_SQRT_2));
    let pdf = (-0.5 * v * v).exp() * 0.398_942_3;
    cdf + v * pdf
}

/// Materialized axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::Invalid {
            op: "permute",
            msg: format!("{axes:?} is not a permutation of rank {rank}"),
        });
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = x.numel();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let src = x.data();
    // innermost axis handled as a strided run
    let last = if rank == 0 { 1 } else { out_shape[rank - 1] };
    let last_stride = if rank == 0 { 0 } else { strides[rank - 1] };
    if total > 0 {
        loop {
            for j in 0..last {
                out.push(src[off + j * last_stride]);
            }
            if rank <= 1 {
                break;
            }
            let mut d = rank - 2;
            loop {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
                if d == 0 {
                    break;
                }
                d -= 1;
            }
            if out.len() == total {
                break;
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn transpose(x: &Tensor, d0: usize, d1: usize) -> Result<Tensor> {
    check_axis("transpose", x.shape(), d0.max(d1))?;
    let mut axes: Vec<usize> = (0..x.rank()).collect();
    axes.swap(d0, d1);
    permute(x, &axes)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::Invalid {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    check_axis("concat", first.shape(), axis)?;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let run = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * run..(o + 1) * run]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(shape, out)
}

/// Positions of the selected slices, shared by [`gather`] and its adjoint:
/// for each output slice, the flat offset of its source slice, plus the
/// slice length.
pub(crate) fn gather_offsets(shape: &[usize], axis: usize, index: &Index) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    check_axis("gather", shape, axis)?;
    let (outer, extent, inner) = split_axis(shape, axis);
    let k = *index.shape().last().unwrap_or(&0);
    let shared = index.shape().len() == 1;
    if !shared && index.shape()[..index.shape().len() - 1] != shape[..axis] {
        return Err(TensorError::ShapeMismatch {
            op: "gather",
            lhs: shape.to_vec(),
            rhs: index.shape().to_vec(),
        });
    }
    if let Some(&bad) = index.data().iter().find(|&&i| i >= extent) {
        return Err(TensorError::IndexOutOfRange {
            op: "gather",
            index: bad,
            extent,
        });
    }
    let mut offsets = Vec::with_capacity(outer * k);
    for o in 0..outer {
        for j in 0..k {
            let src = if shared { index.data()[j] } else { index.data()[o * k + j] };
            offsets.push((o * extent + src) * inner);
        }
    }
    let mut out_shape = shape[..axis].to_vec();
    out_shape.push(k);
    out_shape.extend_from_slice(&shape[axis + 1..]);
    Ok((offsets, out_shape, inner))
}

/// Selects slices along `axis`. `index` is either one-dimensional (shared by
/// all outer positions) or has shape `x.shape[..axis] ++ [k]` (one row of
/// indices per outer position, as in `torch.gather` on the leading dims).
pub fn gather(x: &Tensor, axis: usize, index: &Index) -> Result<Tensor> {
    let (offsets, shape, inner) = gather_offsets(x.shape(), axis, index)?;
    let mut out = Vec::with_capacity(offsets.len() * inner);
    for off in offsets {
        out.extend_from_slice(&x.data()[off..off + inner]);
    }
    Tensor::new(shape, out)
}

pub fn sum(x: &Tensor) -> Tensor {
    Tensor::scalar(sum_f64(x.data()) as f32)
}

/// Stable argsort along the last axis of a 2-D array.
pub fn argsort_rows(x: &Tensor) -> Result<Index> {
    if x.rank() != 2 {
        return Err(TensorError::Invalid {
            op: "argsort",
            msg: format!("expected rank 2, got {:?}", x.shape()),
        });
    }
    let cols = x.shape()[1];
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols.max(1)) {
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&i, &j| row[i].total_cmp(&row[j]));
        data.extend(order);
    }
    Index::new(x.shape().to_vec(), data)
}
