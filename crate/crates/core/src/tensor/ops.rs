//! Primitive operations and their backward rules.

use std::sync::Arc;

use super::tape::{GradSink, NodeRef, Tape};
use super::{gemm, Mask, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Zero padding applied along time by [`conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// `(r - 1) / 2` zeros on each side; output length equals input length.
    Same,
    /// `r - 1` zeros on the left only; output `t` sees inputs `<= t`.
    Causal,
    /// No padding; output length is `time - r + 1`.
    Valid,
}

pub(crate) struct Saved<T: Scalar> {
    id: Option<usize>,
    data: Arc<Vec<T>>,
}

pub(crate) struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
    /// `b` is a single matrix and `a` batches are laid out contiguously.
    flat: bool,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Saved<T>,
        b: Saved<T>,
        plan: MatMulPlan,
    },
    Binary {
        kind: BinaryKind,
        a: Saved<T>,
        b: Saved<T>,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
        out_shape: Vec<usize>,
    },
    Scale {
        input: Option<usize>,
        factor: T,
    },
    Identity {
        input: Option<usize>,
    },
    Sigmoid {
        input: Option<usize>,
        out: Arc<Vec<T>>,
    },
    Relu {
        input: Option<usize>,
        x: Arc<Vec<T>>,
    },
    Softmax {
        input: Option<usize>,
        out: Arc<Vec<T>>,
        cols: usize,
    },
    LogSoftmax {
        input: Option<usize>,
        out: Arc<Vec<T>>,
        cols: usize,
    },
    Unfold {
        input: Option<usize>,
        batch: usize,
        time_in: usize,
        time_out: usize,
        dim: usize,
        kernel: usize,
        pad_left: usize,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        input: Option<usize>,
        outer: usize,
        in_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Gather {
        table: Option<usize>,
        ids: Arc<Vec<usize>>,
        cols: usize,
    },
    Standardize {
        input: Option<usize>,
        y: Arc<Vec<T>>,
        inv_std: Vec<T>,
        cols: usize,
    },
    Sum {
        input: Option<usize>,
        numel: usize,
    },
    SelectLast {
        input: Option<usize>,
        ids: Arc<Vec<usize>>,
        cols: usize,
    },
    Transpose {
        input: Option<usize>,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    IndexSelect {
        input: Option<usize>,
        indices: Arc<Vec<usize>>,
        row: usize,
    },
}

fn id_of<T: Scalar>(t: &Tensor<T>) -> Option<usize> {
    t.node().map(|n| n.id)
}

fn saved<T: Scalar>(t: &Tensor<T>) -> Saved<T> {
    Saved {
        id: id_of(t),
        data: t.data_arc().clone(),
    }
}

fn tape_of<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Option<Tape<T>>> {
    let mut found: Option<&Tape<T>> = None;
    for t in inputs {
        if let Some(node) = t.node() {
            match found {
                None => found = Some(&node.tape),
                Some(tape) if !tape.same(&node.tape) => {
                    return Err(Error::Contract("operands recorded on different tapes".into()))
                }
                Some(_) => {}
            }
        }
    }
    Ok(found.cloned())
}

/// Wraps a forward result, recording `op` when any input is on a tape.
fn finish<T: Scalar>(
    shape: Vec<usize>,
    data: Vec<T>,
    inputs: &[&Tensor<T>],
    op: impl FnOnce(&Arc<Vec<T>>) -> Op<T>,
) -> Result<Tensor<T>> {
    let data = Arc::new(data);
    let mut out = Tensor::from_parts(shape, data);
    if let Some(tape) = tape_of(inputs)? {
        let id = tape.push(out.numel(), op(out.data_arc()))?;
        out.node = Some(NodeRef { tape, id });
    }
    Ok(out)
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out.push(match (da, db) {
            _ if da == db => da,
            (1, _) => db,
            (_, 1) => da,
            _ => return None,
        });
    }
    Some(out)
}

/// Element strides of `shape` aligned to `out` (0 on broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        let j = i + out.len() - shape.len();
        strides[j] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element.
fn broadcast_walk(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Same,
    /// `b` repeats over `a` (b is a suffix block of length `nb`).
    TileB(usize),
    /// `b` is constant along the last axis of size `cols`.
    RowB(usize),
    General,
}

fn layout(a: &[usize], b: &[usize], out: &[usize]) -> Layout {
    if a == b {
        return Layout::Same;
    }
    if a != out {
        return Layout::General;
    }
    let nb: usize = b.iter().product();
    let trimmed: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    if !trimmed.is_empty()
        && trimmed.len() <= a.len()
        && a[a.len() - trimmed.len()..] == trimmed[..]
    {
        return Layout::TileB(nb);
    }
    if b.len() == a.len() && b.last() == Some(&1) && b[..b.len() - 1] == a[..a.len() - 1] {
        return Layout::RowB(*a.last().unwrap());
    }
    Layout::General
}

fn apply_binary<T: Scalar>(kind: BinaryKind, x: T, y: T) -> T {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    }
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product over the last two axes, broadcasting leading axes.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
            return Err(Error::dim("matmul", a, b));
        }
        let (m, k, n) = (a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]);
        let batch_a = &a[..a.len() - 2];
        let batch_b = &b[..b.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| Error::dim("matmul", a, b))?;
        let sa = aligned_strides(batch_a, &batch);
        let sb = aligned_strides(batch_b, &batch);
        let mut a_off = Vec::new();
        let mut b_off = Vec::new();
        broadcast_walk(&batch, &sa, &sb, |_, ia, ib| {
            a_off.push(ia * m * k);
            b_off.push(ib * k * n);
        });
        let nb = a_off.len();
        let flat = b_off.iter().all(|&o| o == 0)
            && a_off.iter().enumerate().all(|(i, &o)| o == i * m * k);
        let mut out = vec![T::zero(); nb * m * n];
        if flat {
            gemm(nb * m, k, n, self.data(), false, rhs.data(), false, &mut out, false);
        } else {
            for i in 0..nb {
                gemm(
                    m,
                    k,
                    n,
                    &self.data()[a_off[i]..],
                    false,
                    &rhs.data()[b_off[i]..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let plan = MatMulPlan {
            m,
            k,
            n,
            a_off,
            b_off,
            flat,
        };
        finish(shape, out, &[self, rhs], |_| Op::MatMul {
            a: saved(self),
            b: saved(rhs),
            plan,
        })
    }

    pub fn binary(&self, rhs: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let out_shape =
            broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| Error::dim(name, self.shape(), rhs.shape()))?;
        let (a, b) = (self.data(), rhs.data());
        let out: Vec<T> = match layout(self.shape(), rhs.shape(), &out_shape) {
            Layout::Same => a.iter().zip(b).map(|(&x, &y)| apply_binary(kind, x, y)).collect(),
            Layout::TileB(nb) => a
                .iter()
                .enumerate()
                .map(|(i, &x)| apply_binary(kind, x, b[i % nb]))
                .collect(),
            Layout::RowB(cols) => a
                .iter()
                .enumerate()
                .map(|(i, &x)| apply_binary(kind, x, b[i / cols]))
                .collect(),
            Layout::General => {
                let n: usize = out_shape.iter().product();
                let mut out = vec![T::zero(); n];
                let sa = aligned_strides(self.shape(), &out_shape);
                let sb = aligned_strides(rhs.shape(), &out_shape);
                broadcast_walk(&out_shape, &sa, &sb, |o, ia, ib| {
                    out[o] = apply_binary(kind, a[ia], b[ib]);
                });
                out
            }
        };
        let (a_shape, b_shape) = (self.shape().to_vec(), rhs.shape().to_vec());
        finish(out_shape.clone(), out, &[self, rhs], |_| Op::Binary {
            kind,
            a: saved(self),
            b: saved(rhs),
            a_shape,
            b_shape,
            out_shape,
        })
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn scale(&self, factor: T) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&x| x * factor).collect();
        finish(self.shape().to_vec(), out, &[self], |_| Op::Scale {
            input: id_of(self),
            factor,
        })
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&x| x + c).collect();
        finish(self.shape().to_vec(), out, &[self], |_| Op::Identity { input: id_of(self) })
    }

    /// `1 / (1 + e^-x)`, evaluated without overflow for large `|x|`.
    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&x| sigmoid(x)).collect();
        finish(self.shape().to_vec(), out, &[self], |out| Op::Sigmoid {
            input: id_of(self),
            out: out.clone(),
        })
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&x| x.max(T::zero())).collect();
        finish(self.shape().to_vec(), out, &[self], |_| Op::Relu {
            input: id_of(self),
            x: self.data_arc().clone(),
        })
    }

    /// Softmax over the last axis. Masked positions are exactly zero; a row
    /// without any unmasked entry is an error.
    pub fn softmax_last_dim(&self, mask: Option<&Mask>) -> Result<Tensor<T>> {
        if let Some(mask) = mask {
            if mask.shape() != self.shape() {
                return Err(Error::dim("softmax mask", self.shape(), mask.shape()));
            }
        }
        let cols = self.last_dim();
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        if cols > 0 {
            for (row, (xr, yr)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
                let allowed = mask.map(|m| &m.allowed()[row * cols..(row + 1) * cols]);
                let ok = |j: usize| allowed.is_none_or(|a| a[j]);
                let mut max = T::neg_infinity();
                let mut any = false;
                for (j, &v) in xr.iter().enumerate() {
                    if ok(j) {
                        any = true;
                        max = max.max(v);
                    }
                }
                if !any {
                    return Err(Error::InvalidMask { row });
                }
                let mut total = T::zero();
                for (j, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
                    if ok(j) {
                        *y = (v - max).exp();
                        total = total + *y;
                    }
                }
                yr.iter_mut().for_each(|y| *y = *y / total);
            }
        }
        finish(self.shape().to_vec(), out, &[self], |out| Op::Softmax {
            input: id_of(self),
            out: out.clone(),
            cols,
        })
    }

    pub fn log_softmax_last_dim(&self) -> Result<Tensor<T>> {
        let cols = self.last_dim();
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        if cols > 0 {
            for (xr, yr) in x.chunks(cols).zip(out.chunks_mut(cols)) {
                let max = xr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let total: T = xr.iter().map(|&v| (v - max).exp()).sum();
                let log_z = max + total.ln();
                for (y, &v) in yr.iter_mut().zip(xr) {
                    *y = v - log_z;
                }
            }
        }
        finish(self.shape().to_vec(), out, &[self], |out| Op::LogSoftmax {
            input: id_of(self),
            out: out.clone(),
            cols,
        })
    }

    /// Sliding windows over time: `[batch, time, d] -> [batch, time', r*d]`,
    /// each row the concatenation of `r` consecutive input rows in time order.
    pub fn unfold_time(&self, kernel: usize, padding: Padding) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 3 || kernel == 0 {
            return Err(Error::dim("unfold", s, &[kernel]));
        }
        let (batch, time_in, dim) = (s[0], s[1], s[2]);
        let (pad_left, time_out) = match padding {
            Padding::Same => {
                if kernel.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "`same` padding needs an odd kernel, got {kernel}"
                    )));
                }
                ((kernel - 1) / 2, time_in)
            }
            Padding::Causal => (kernel - 1, time_in),
            Padding::Valid => {
                if time_in < kernel {
                    return Err(Error::dim("unfold (valid)", s, &[kernel]));
                }
                (0, time_in - kernel + 1)
            }
        };
        let x = self.data();
        let width = kernel * dim;
        let mut out = vec![T::zero(); batch * time_out * width];
        for b in 0..batch {
            for t in 0..time_out {
                let row = &mut out[(b * time_out + t) * width..][..width];
                for j in 0..kernel {
                    let src = t + j;
                    if src < pad_left || src - pad_left >= time_in {
                        continue;
                    }
                    let src = src - pad_left;
                    row[j * dim..(j + 1) * dim]
                        .copy_from_slice(&x[(b * time_in + src) * dim..][..dim]);
                }
            }
        }
        finish(vec![batch, time_out, width], out, &[self], |_| Op::Unfold {
            input: id_of(self),
            batch,
            time_in,
            time_out,
            dim,
            kernel,
            pad_left,
        })
    }

    /// Concatenation along `dim`; all other axes must agree.
    pub fn concat(parts: &[&Tensor<T>], dim: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = first.shape();
        if dim >= s0.len() {
            return Err(Error::dim("concat", s0, &[dim]));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != s0.len() || s[..dim] != s0[..dim] || s[dim + 1..] != s0[dim + 1..] {
                return Err(Error::dim("concat", s0, s));
            }
        }
        let outer: usize = s0[..dim].iter().product();
        let inner: usize = s0[dim + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape()[dim]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[dim] * inner;
                out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = s0.to_vec();
        shape[dim] = total;
        let meta: Vec<(Option<usize>, usize)> =
            parts.iter().map(|p| (id_of(p), p.shape()[dim])).collect();
        finish(shape, out, parts, |_| Op::Concat {
            parts: meta,
            outer,
            inner,
        })
    }

    pub fn concat_last_dim(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() == 0 || self.rank() != rhs.rank() {
            return Err(Error::dim("concat_last_dim", self.shape(), rhs.shape()));
        }
        Tensor::concat(&[self, rhs], self.rank() - 1)
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if dim >= s.len() || start + len > s[dim] {
            return Err(Error::dim("narrow", s, &[dim, start, len]));
        }
        let outer: usize = s[..dim].iter().product();
        let inner: usize = s[dim + 1..].iter().product();
        let in_len = s[dim];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * in_len + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[dim] = len;
        finish(shape, out, &[self], |_| Op::Narrow {
            input: id_of(self),
            outer,
            in_len,
            start,
            len,
            inner,
        })
    }

    /// Row lookup: `table [rows, d]`, `ids` of shape `index_shape` gives
    /// `index_shape ++ [d]`.
    pub fn gather_rows(&self, ids: &[usize], index_shape: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("gather_rows", s, index_shape));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { id, size: rows });
            }
            out.extend_from_slice(&self.data()[id * cols..(id + 1) * cols]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(cols);
        let ids = Arc::new(ids.to_vec());
        finish(shape, out, &[self], |_| Op::Gather {
            table: id_of(self),
            ids,
            cols,
        })
    }

    /// Per-row standardization over the last axis:
    /// `(x - mean) / sqrt(var + eps)` with population variance.
    pub fn standardize_last_dim(&self, eps: T) -> Result<Tensor<T>> {
        let cols = self.last_dim();
        if cols == 0 {
            return Err(Error::dim("standardize", self.shape(), &[]));
        }
        let n = T::cast(cols as f64);
        let mut out = vec![T::zero(); self.numel()];
        let mut inv_std = Vec::with_capacity(self.numel() / cols);
        for (xr, yr) in self.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = xr.iter().copied().sum::<T>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        finish(self.shape().to_vec(), out, &[self], |y| Op::Standardize {
            input: id_of(self),
            y: y.clone(),
            inv_std,
            cols,
        })
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let total = self.data().iter().copied().sum::<T>();
        finish(vec![], vec![total], &[self], |_| Op::Sum {
            input: id_of(self),
            numel: self.numel(),
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        if self.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        self.sum_all()?.scale(T::one() / T::cast(self.numel() as f64))
    }

    /// Picks `x[..., ids[i]]` for every leading index `i`.
    pub fn select_last(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let cols = self.last_dim();
        let rows = self.numel().checked_div(cols).unwrap_or(0);
        if self.rank() == 0 || ids.len() != rows {
            return Err(Error::dim("select_last", self.shape(), &[ids.len()]));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(Error::Vocabulary { id, size: cols });
            }
            out.push(self.data()[r * cols + id]);
        }
        let shape = self.shape()[..self.rank() - 1].to_vec();
        let ids = Arc::new(ids.to_vec());
        finish(shape, out, &[self], |_| Op::SelectLast {
            input: id_of(self),
            ids,
            cols,
        })
    }

    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::dim("transpose_last2", s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.numel() / (rows * cols).max(1);
        let out = transpose_blocks(self.data(), batch, rows, cols);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        finish(shape, out, &[self], |_| Op::Transpose {
            input: id_of(self),
            batch,
            rows,
            cols,
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", self.shape(), &shape));
        }
        let mut out = Tensor::from_parts(shape, self.data_arc().clone());
        if let Some(node) = self.node() {
            let id = node.tape.push(out.numel(), Op::Identity { input: Some(node.id) })?;
            out.node = Some(NodeRef {
                tape: node.tape.clone(),
                id,
            });
        }
        Ok(out)
    }

    /// Rows of the leading axis in the order given by `indices` (repeats
    /// allowed).
    pub fn index_select0(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::dim("index_select0", s, &[]));
        }
        let row: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::dim("index_select0", s, &[i]));
            }
            out.extend_from_slice(&self.data()[i * row..(i + 1) * row]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        let indices = Arc::new(indices.to_vec());
        finish(shape, out, &[self], |_| Op::IndexSelect {
            input: id_of(self),
            indices,
            row,
        })
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn transpose_blocks<T: Scalar>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x[b * rows * cols..][..rows * cols];
        let dst = &mut out[b * rows * cols..][..rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

/// One-dimensional convolution over time.
///
/// `x: [batch, time, d_in]`, `filter: [r * d_in, d_out]`, `bias: [d_out]`.
/// The kernel width `r` is `filter.rows / d_in`.
pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    filter: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (xs, fs) = (x.shape(), filter.shape());
    if xs.len() != 3 || fs.len() != 2 || xs[2] == 0 || fs[0] % xs[2] != 0 || fs[0] == 0 {
        return Err(Error::dim("conv1d", xs, fs));
    }
    if bias.shape() != [fs[1]] {
        return Err(Error::dim("conv1d bias", fs, bias.shape()));
    }
    let kernel = fs[0] / xs[2];
    x.unfold_time(kernel, padding)?.matmul(filter)?.add(bias)
}

impl<T: Scalar> Op<T> {
    pub(crate) fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => matmul_backward(a, b, plan, g, sink),
            Op::Binary {
                kind,
                a,
                b,
                a_shape,
                b_shape,
                out_shape,
            } => binary_backward(*kind, a, b, a_shape, b_shape, out_shape, g, sink),
            Op::Scale { input, factor } => {
                sink.put(*input, g.iter().map(|&x| x * *factor).collect())
            }
            Op::Identity { input } => sink.add(*input, g),
            Op::Sigmoid { input, out } => sink.put(
                *input,
                g.iter()
                    .zip(out.iter())
                    .map(|(&gi, &s)| gi * s * (T::one() - s))
                    .collect(),
            ),
            Op::Relu { input, x } => sink.put(
                *input,
                g.iter()
                    .zip(x.iter())
                    .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                    .collect(),
            ),
            Op::Softmax { input, out, cols } => {
                let mut dx = vec![T::zero(); g.len()];
                for ((gr, sr), dr) in g.chunks(*cols).zip(out.chunks(*cols)).zip(dx.chunks_mut(*cols)) {
                    let dot: T = gr.iter().zip(sr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &s) in dr.iter_mut().zip(gr).zip(sr) {
                        *d = s * (gi - dot);
                    }
                }
                sink.put(*input, dx);
            }
            Op::LogSoftmax { input, out, cols } => {
                let mut dx = vec![T::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks(*cols).zip(out.chunks(*cols)).zip(dx.chunks_mut(*cols)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &gi), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gi - y.exp() * total;
                    }
                }
                sink.put(*input, dx);
            }
            Op::Unfold {
                input,
                batch,
                time_in,
                time_out,
                dim,
                kernel,
                pad_left,
            } => {
                let Some(id) = *input else { return };
                let dx = sink.buf(id);
                let width = kernel * dim;
                for b in 0..*batch {
                    for t in 0..*time_out {
                        let row = &g[(b * time_out + t) * width..][..width];
                        for j in 0..*kernel {
                            let src = t + j;
                            if src < *pad_left || src - pad_left >= *time_in {
                                continue;
                            }
                            let dst = &mut dx[(b * time_in + src - pad_left) * dim..][..*dim];
                            for (d, &v) in dst.iter_mut().zip(&row[j * dim..(j + 1) * dim]) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(id, size) in parts {
                    if let Some(id) = id {
                        let buf = sink.buf(id);
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..size * inner];
                            let dst = &mut buf[o * size * inner..][..size * inner];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                    offset += size;
                }
            }
            Op::Narrow {
                input,
                outer,
                in_len,
                start,
                len,
                inner,
            } => {
                let Some(id) = *input else { return };
                let buf = sink.buf(id);
                for o in 0..*outer {
                    let src = &g[o * len * inner..][..len * inner];
                    let dst = &mut buf[(o * in_len + start) * inner..][..len * inner];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
            }
            Op::Gather { table, ids, cols } => {
                let Some(id) = *table else { return };
                let buf = sink.buf(id);
                for (r, &row) in ids.iter().enumerate() {
                    let dst = &mut buf[row * cols..][..*cols];
                    for (d, &v) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d = *d + v;
                    }
                }
            }
            Op::Standardize {
                input,
                y,
                inv_std,
                cols,
            } => {
                let n = T::cast(*cols as f64);
                let mut dx = vec![T::zero(); g.len()];
                for (((gr, yr), dr), &inv) in g
                    .chunks(*cols)
                    .zip(y.chunks(*cols))
                    .zip(dx.chunks_mut(*cols))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = inv * (gi - mean_g - yi * mean_gy);
                    }
                }
                sink.put(*input, dx);
            }
            Op::Sum { input, numel } => sink.put(*input, vec![g[0]; *numel]),
            Op::SelectLast { input, ids, cols } => {
                let Some(id) = *input else { return };
                let buf = sink.buf(id);
                for (r, &c) in ids.iter().enumerate() {
                    buf[r * cols + c] = buf[r * cols + c] + g[r];
                }
            }
            Op::Transpose {
                input,
                batch,
                rows,
                cols,
            } => sink.put(*input, transpose_blocks(g, *batch, *cols, *rows)),
            Op::IndexSelect {
                input,
                indices,
                row,
            } => {
                let Some(id) = *input else { return };
                let buf = sink.buf(id);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut buf[i * row..(i + 1) * row];
                    for (d, &v) in dst.iter_mut().zip(&g[r * row..(r + 1) * row]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn matmul_backward<T: Scalar>(
    a: &Saved<T>,
    b: &Saved<T>,
    p: &MatMulPlan,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (m, k, n) = (p.m, p.k, p.n);
    let nb = p.a_off.len();
    if a.id.is_some() {
        let mut ga = vec![T::zero(); a.data.len()];
        if p.flat {
            gemm(nb * m, n, k, g, false, &b.data, true, &mut ga, false);
        } else {
            for i in 0..nb {
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..],
                    false,
                    &b.data[p.b_off[i]..],
                    true,
                    &mut ga[p.a_off[i]..],
                    true,
                );
            }
        }
        sink.put(a.id, ga);
    }
    if b.id.is_some() {
        let mut gb = vec![T::zero(); b.data.len()];
        if p.flat {
            gemm(k, nb * m, n, &a.data, true, g, false, &mut gb, false);
        } else {
            for i in 0..nb {
                gemm(
                    k,
                    m,
                    n,
                    &a.data[p.a_off[i]..],
                    true,
                    &g[i * m * n..],
                    false,
                    &mut gb[p.b_off[i]..],
                    true,
                );
            }
        }
        sink.put(b.id, gb);
    }
}

#[allow(clippy::too_many_arguments)]
fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: &Saved<T>,
    b: &Saved<T>,
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (av, bv) = (&a.data, &b.data);
    let mut ga = a.id.map(|_| vec![T::zero(); av.len()]);
    let mut gb = b.id.map(|_| vec![T::zero(); bv.len()]);
    let sign_b = if kind == BinaryKind::Sub { -T::one() } else { T::one() };
    let mut visit = |o: usize, ia: usize, ib: usize| {
        let go = g[o];
        if let Some(ga) = ga.as_mut() {
            let d = if kind == BinaryKind::Mul { go * bv[ib] } else { go };
            ga[ia] = ga[ia] + d;
        }
        if let Some(gb) = gb.as_mut() {
            let d = if kind == BinaryKind::Mul { go * av[ia] } else { go * sign_b };
            gb[ib] = gb[ib] + d;
        }
    };
    match layout(a_shape, b_shape, out_shape) {
        Layout::Same => (0..g.len()).for_each(|o| visit(o, o, o)),
        Layout::TileB(nb) => (0..g.len()).for_each(|o| visit(o, o, o % nb)),
        Layout::RowB(cols) => (0..g.len()).for_each(|o| visit(o, o, o / cols)),
        Layout::General => {
            let sa = aligned_strides(a_shape, out_shape);
            let sb = aligned_strides(b_shape, out_shape);
            broadcast_walk(out_shape, &sa, &sb, visit);
        }
    }
    if let Some(ga) = ga {
        sink.put(a.id, ga);
    }
    if let Some(gb) = gb {
        sink.put(b.id, gb);
    }
}
