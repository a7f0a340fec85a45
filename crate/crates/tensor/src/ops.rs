//! Forward primitives. Every op records itself on the graph when an input
//! requires grad and grad mode is on.

use std::rc::Rc;

use crate::backward::Op;
use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Gathers `src` into a row-major buffer of `out_shape`, reading element
/// `idx` at `Σ idx[d]·src_strides[d]`. Zero strides broadcast.
pub(crate) fn strided_gather(out_shape: &[usize], src: &[f64], src_strides: &[usize]) -> Vec<f64> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if out_shape.is_empty() {
        out.push(src[0]);
        return out;
    }
    let rank = out_shape.len();
    let inner_len = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer = n / inner_len;
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&src[off..off + inner_len]);
        } else {
            for j in 0..inner_len {
                out.push(src[off + j * inner_stride]);
            }
        }
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// Inverse of [`strided_gather`]: accumulates `src` (laid out as
/// `src_shape`) into `dst` at strided offsets, in row-major order of `src`.
pub(crate) fn strided_accumulate(src_shape: &[usize], src: &[f64], dst: &mut [f64], dst_strides: &[usize]) {
    let n = numel(src_shape);
    if n == 0 {
        return;
    }
    if src_shape.is_empty() {
        dst[0] += src[0];
        return;
    }
    let rank = src_shape.len();
    let inner_len = src_shape[rank - 1];
    let inner_stride = dst_strides[rank - 1];
    let outer = n / inner_len;
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    let mut pos = 0usize;
    for _ in 0..outer {
        for j in 0..inner_len {
            dst[off + j * inner_stride] += src[pos + j];
        }
        pos += inner_len;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += dst_strides[d];
            if idx[d] < src_shape[d] {
                break;
            }
            off -= dst_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// (outer, axis length, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, n, inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidShape {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl Tensor {
    fn map_unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op, &[self])
    }

    fn binary(&self, rhs: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() == rhs.shape() {
            let data = self.data().iter().zip(rhs.data()).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor::from_op(data, self.shape().to_vec(), op, &[self, rhs]));
        }
        let shape = broadcast_shape(name, self.shape(), rhs.shape())?;
        let a = self.broadcast_to(&shape)?;
        let b = rhs.broadcast_to(&shape)?;
        a.binary(&b, op, name, f)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.data().contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary(rhs, Op::Div, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.map_unary(Op::Neg, |x| -x)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        self.map_unary(Op::Scale(c), |x| x * c)
    }

    /// Adds a constant.
    pub fn shift(&self, c: f64) -> Tensor {
        self.map_unary(Op::Shift, |x| x + c)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = self.map_unary(Op::Exp, f64::exp);
        if !out.all_finite() {
            return Err(TensorError::Domain {
                op: "exp",
                msg: "overflow".into(),
            });
        }
        Ok(out)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(x) = self.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("argument {x} is not positive"),
            });
        }
        Ok(self.map_unary(Op::Log, f64::ln))
    }

    /// Elementwise `x^p`. Non-integer exponents need positive bases; negative
    /// exponents need nonzero bases.
    pub fn powf(&self, p: f64) -> Result<Tensor> {
        let integral = p.fract() == 0.0;
        for &x in self.data() {
            if (x < 0.0 && !integral) || (x == 0.0 && p < 0.0) {
                return Err(TensorError::Domain {
                    op: "powf",
                    msg: format!("{x}^{p} is undefined"),
                });
            }
        }
        Ok(self.map_unary(Op::Powf(p), |x| x.powf(p)))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.powf(0.5)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn abs(&self) -> Tensor {
        self.map_unary(Op::Abs, f64::abs)
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        let (batch, m, k, n) = match (a.len(), b.len()) {
            (2, 2) if a[1] == b[0] => (1, a[0], a[1], b[1]),
            (3, 3) if a[0] == b[0] && a[2] == b[1] => (a[0], a[1], a[2], b[2]),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(), rhs.data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if a.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(Tensor::from_op(out, shape, Op::MatMul, &[self, rhs]))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..n {
                    max = max.max(x[at(k)]);
                }
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[at(k)] /= sum;
                }
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Softmax { axis }, &[self]))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = o * n * inner + k * inner;
                let row = &mut out[o * inner..(o + 1) * inner];
                for (r, &v) in row.iter_mut().zip(&x[base..base + inner]) {
                    *r += v;
                }
            }
        }
        let shape = reduced_shape(self.shape(), axis, keepdim);
        Ok(Tensor::from_op(out, shape, Op::SumAxis { axis, keepdim }, &[self]))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        let mut s = 0.0;
        for &v in self.data() {
            s += v;
        }
        Tensor::from_op(vec![s], Vec::new(), Op::SumAll, &[self])
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64))
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    fn extremum_axis(&self, axis: usize, keepdim: bool, take_max: bool) -> Result<Tensor> {
        let name = if take_max { "max_axis" } else { "min_axis" };
        check_axis(name, self.shape(), axis)?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: name,
                msg: "empty reduction axis".into(),
            });
        }
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * n * inner + i];
                for k in 1..n {
                    let v = x[o * n * inner + k * inner + i];
                    if (take_max && v > best) || (!take_max && v < best) {
                        best = v;
                    }
                }
                out[o * inner + i] = best;
            }
        }
        let shape = reduced_shape(self.shape(), axis, keepdim);
        let op = if take_max {
            Op::MaxAxis { axis, keepdim }
        } else {
            Op::MinAxis { axis, keepdim }
        };
        Ok(Tensor::from_op(out, shape, op, &[self]))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.extremum_axis(axis, keepdim, true)
    }

    pub fn min_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.extremum_axis(axis, keepdim, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::shared(
            Rc::clone(&self.inner.data),
            shape.to_vec(),
            Op::Reshape,
            &[self],
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of rank {rank}"),
            });
        }
        let src_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let data = strided_gather(&out_shape, self.data(), &perm_strides);
        Ok(Tensor::from_op(data, out_shape, Op::Permute(axes.to_vec()), &[self]))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        check_axis("transpose", self.shape(), a.max(b))?;
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "t",
                msg: format!("rank {r} has no matrix axes"),
            });
        }
        self.transpose(r - 2, r - 1)
    }

    /// Explicit numpy-style broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let src = self.shape();
        let err = || TensorError::ShapeMismatch {
            op: "broadcast_to",
            lhs: src.to_vec(),
            rhs: shape.to_vec(),
        };
        if src.len() > shape.len() {
            return Err(err());
        }
        let lead = shape.len() - src.len();
        let src_strides = strides(src);
        let mut bstrides = vec![0; shape.len()];
        for (d, &s) in src.iter().enumerate() {
            if s == shape[lead + d] {
                bstrides[lead + d] = src_strides[d];
            } else if s != 1 {
                return Err(err());
            }
        }
        let data = strided_gather(shape, self.data(), &bstrides);
        Ok(Tensor::from_op(data, shape.to_vec(), Op::BroadcastTo, &[self]))
    }

    /// Sums broadcast axes away so the result has `shape`; inverse of
    /// [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let src = self.shape();
        let err = || TensorError::ShapeMismatch {
            op: "sum_to",
            lhs: src.to_vec(),
            rhs: shape.to_vec(),
        };
        if shape.len() > src.len() {
            return Err(err());
        }
        let lead = src.len() - shape.len();
        let dst_strides = strides(shape);
        let mut acc_strides = vec![0; src.len()];
        for (d, &s) in shape.iter().enumerate() {
            if s == src[lead + d] {
                acc_strides[lead + d] = dst_strides[d];
            } else if s != 1 {
                return Err(err());
            }
        }
        let mut out = vec![0.0; numel(shape)];
        strided_accumulate(src, self.data(), &mut out, &acc_strides);
        Ok(Tensor::from_op(out, shape.to_vec(), Op::SumTo, &[self]))
    }

    /// Selects rows of axis 0 (embedding lookup).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                msg: "rank-0 tensor has no rows".into(),
            });
        }
        let n = self.dim(0);
        let row = self.numel() / n.max(1);
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            if i >= n {
                return Err(TensorError::InvalidShape {
                    op: "gather_rows",
                    msg: format!("row {i} out of range for {n} rows"),
                });
            }
            data.extend_from_slice(&self.data()[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = index.len();
        Ok(Tensor::from_op(data, shape, Op::GatherRows(index.into()), &[self]))
    }

    /// Adds row `j` into output row `index[j]` of a zero tensor with
    /// `rows` rows; adjoint of [`Tensor::gather_rows`].
    pub fn scatter_rows(&self, index: &[usize], rows: usize) -> Result<Tensor> {
        if self.rank() == 0 || self.dim(0) != index.len() {
            return Err(TensorError::InvalidShape {
                op: "scatter_rows",
                msg: format!("{} indices for shape {:?}", index.len(), self.shape()),
            });
        }
        let row = if index.is_empty() { 0 } else { self.numel() / index.len() };
        let mut data = vec![0.0; rows * row];
        for (j, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::InvalidShape {
                    op: "scatter_rows",
                    msg: format!("row {i} out of range for {rows} rows"),
                });
            }
            for (d, s) in data[i * row..(i + 1) * row].iter_mut().zip(&self.data()[j * row..(j + 1) * row]) {
                *d += s;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows;
        Ok(Tensor::from_op(data, shape, Op::ScatterRows(index.into()), &[self]))
    }

    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        check_axis("concat", first.shape(), axis)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape().iter().enumerate().all(|(d, &s)| d == axis || s == first.shape()[d]);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            shape[axis] += t.shape()[axis];
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for t in tensors {
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(data, shape, Op::Concat { axis }, tensors))
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self.shape(), axis)?;
        let full = self.shape()[axis];
        if start + len > full {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                msg: format!("range {start}..{} exceeds axis length {full}", start + len),
            });
        }
        let (outer, _, inner) = split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(data, shape, Op::Narrow { axis, start }, &[self]))
    }

    /// Places this tensor at `start` along `axis` inside zeros of length
    /// `full`; adjoint of [`Tensor::narrow`].
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Result<Tensor> {
        check_axis("embed", self.shape(), axis)?;
        let len = self.shape()[axis];
        if start + len > full {
            return Err(TensorError::InvalidShape {
                op: "embed",
                msg: format!("range {start}..{} exceeds axis length {full}", start + len),
            });
        }
        let (outer, _, inner) = split_axis(self.shape(), axis);
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = o * full * inner + start * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        Ok(Tensor::from_op(data, shape, Op::Embed { axis, start }, &[self]))
    }

    /// Normalizes over the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let axis = self.rank().checked_sub(1).ok_or(TensorError::InvalidShape {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        let centered = self.sub(&self.mean_axis(axis, true)?)?;
        let var = centered.square()?.mean_axis(axis, true)?;
        centered.mul(&var.shift(eps).powf(-0.5)?)
    }

    /// Dot product of two equally-shaped tensors.
    pub fn dot(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        Ok(self.mul(rhs)?.sum_all())
    }
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slices hold exactly m*k, k*n and m*n contiguous row-major
    // elements, matching the strides passed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
