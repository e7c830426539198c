//! Forward evaluation and backward rules for the operation catalog.

use super::kernels::{col2im, gemm, im2col, ConvGeom, Mat};
use super::{Op, Tape, Var};
use crate::tensor::{numel, Scalar, Tensor};
use crate::{Error, Result};

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// How many times `b` repeats to cover `a` when `b`'s shape is a suffix of `a`'s.
fn suffix_repeat(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(numel(&a[..a.len() - b.len()]))
}

fn zip_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let bn = b.numel();
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % bn])).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Sums a broadcast gradient back onto the suffix shape.
fn reduce_to_suffix<T: Scalar>(g: &[T], shape: &[usize]) -> Tensor<T> {
    let n = numel(shape);
    let mut out = vec![T::zero(); n];
    for (i, &v) in g.iter().enumerate() {
        out[i % n] = out[i % n] + v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn unary<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn naive_bmm<T: Scalar>(a: &[T], b: &[T], (m, k, n): (usize, usize, usize), ta: bool, tb: bool, out: &mut [T]) {
    for i in 0..m {
        for j in 0..n {
            let mut s = T::zero();
            for p in 0..k {
                let av = if ta { a[p * m + i] } else { a[i * k + p] };
                let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                s = s + av * bv;
            }
            out[i * n + j] = s;
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if suffix_repeat(ta.shape(), tb.shape()).is_none() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        Ok((ta.clone(), tb.clone()))
    }

    /// Elementwise sum; `b` may have a suffix shape of `a` and is then broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary(a, b, "add")?;
        self.push(zip_broadcast(&ta, &tb, |x, y| x + y), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary(a, b, "sub")?;
        self.push(zip_broadcast(&ta, &tb, |x, y| x - y), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary(a, b, "mul")?;
        self.push(zip_broadcast(&ta, &tb, |x, y| x * y), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let c = T::lit(c);
        let v = unary(self.value(a), |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let c = T::lit(c);
        let v = unary(self.value(a), |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = unary(self.value(a), T::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = unary(self.value(a), T::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = unary(self.value(a), sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = unary(self.value(a), softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = unary(self.value(a), T::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = unary(self.value(a), T::abs);
        self.push(v, Op::Abs(a))
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(Mat::new(ta.data(), m, k), Mat::new(tb.data(), k, n), T::zero(), &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `a (B x m x k) * b (B x k x n)`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            let (ab, bb) = (&ta.data()[i * m * k..(i + 1) * m * k], &tb.data()[i * k * n..(i + 1) * k * n]);
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if m * k * n <= 512 {
                naive_bmm(ab, bb, (m, k, n), false, false, ob);
            } else {
                gemm(Mat::new(ab, m, k), Mat::new(bb, k, n), T::zero(), ob);
            }
        }
        self.push(Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let d = *t.shape().last().ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::Softmax(a))
    }

    /// Normalizes the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(shape_err("layer_norm", format!("gamma {:?} beta {:?} for width {d}", g.shape(), b.shape())));
        }
        let eps = T::lit(eps);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let (xhat, _) = normalize_row(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = xhat[j] * g.data()[j] + b.data()[j];
            }
        }
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::LayerNorm { x, gamma, beta, eps })
    }

    /// 2D convolution, `x: N x C x H x W`, `w: O x C x kh x kw`, optional bias `O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape().to_vec(), tw.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(shape_err("conv2d", format!("input {sx:?} weight {sw:?} stride {stride}")));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(shape_err("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        let g = ConvGeom { channels: sx[1], height: sx[2], width: sx[3], kh: sw[2], kw: sw[3], stride, pad };
        let o = sw[0];
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv2d", format!("bias {:?} for {o} outputs", self.value(b).shape())));
            }
        }
        let (ohw, chw) = (g.col_cols(), g.channels * g.height * g.width);
        let mut out = vec![T::zero(); sx[0] * o * ohw];
        for n in 0..sx[0] {
            let cols = im2col(&tx.data()[n * chw..(n + 1) * chw], g);
            let on = &mut out[n * o * ohw..(n + 1) * o * ohw];
            gemm(Mat::new(tw.data(), o, g.col_rows()), Mat::new(&cols, g.col_rows(), ohw), T::zero(), on);
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (oc, row) in on.chunks_mut(ohw).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + bias[oc]);
                }
            }
        }
        let shape = vec![sx[0], o, g.out_h(), g.out_w()];
        self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, stride, pad })
    }

    /// Transposed 2D convolution without padding, `x: N x I x H x W`,
    /// `w: I x O x kh x kw`; output `N x O x ((H-1)s+kh) x ((W-1)s+kw)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape().to_vec(), tw.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(shape_err("conv_transpose2d", format!("input {sx:?} weight {sw:?}")));
        }
        let (i_ch, o) = (sw[0], sw[1]);
        let g = transpose_geom(&sx, &sw, stride);
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv_transpose2d", format!("bias {:?}", self.value(b).shape())));
            }
        }
        let hw = sx[2] * sx[3];
        let okk = g.col_rows();
        let out_hw = g.height * g.width;
        let mut out = vec![T::zero(); sx[0] * o * out_hw];
        for n in 0..sx[0] {
            let mut cols = vec![T::zero(); okk * hw];
            gemm(Mat::new(tw.data(), i_ch, okk).t(), Mat::new(&tx.data()[n * i_ch * hw..(n + 1) * i_ch * hw], i_ch, hw), T::zero(), &mut cols);
            let img = col2im(&cols, g);
            let on = &mut out[n * o * out_hw..(n + 1) * o * out_hw];
            on.copy_from_slice(&img);
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (oc, row) in on.chunks_mut(out_hw).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + bias[oc]);
                }
            }
        }
        let shape = vec![sx[0], o, g.height, g.width];
        self.push(Tensor::from_parts(shape, out), Op::ConvTranspose2d { x, w, b, stride })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        for &v in inputs {
            self.check(v)?;
        }
        let s0 = self.value(first).shape().to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", format!("axis {axis} for {s0:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != s0.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != s0[d]) {
                return Err(shape_err("concat", format!("{s:?} vs {s0:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split3(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let s = t.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err("slice", format!("{start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, a, inner) = split3(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * a * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let nd = t.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {:?}", t.shape())));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), axes);
        self.push(Tensor::from_parts(shape, data), Op::Permute { x, axes: axes.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(shape_err("transpose", "needs at least 2 axes".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let s = t.sum() / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, a, inner) = split3(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..a {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + t.data()[(o * a + k) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis })
    }

    /// Maximum over all elements; the gradient goes to the first maximizer.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let mut argmax = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if v > t.data()[argmax] {
                argmax = i;
            }
        }
        let m = t.data()[argmax];
        self.push(Tensor::scalar(m), Op::MaxAll { x, argmax })
    }

    /// Keeps entries where `mask` is nonzero and writes exact zeros elsewhere.
    /// `mask` may have a suffix shape of `x`.
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if suffix_repeat(t.shape(), mask.shape()).is_none() {
            return Err(shape_err("mask_mul", format!("{:?} vs mask {:?}", t.shape(), mask.shape())));
        }
        let v = zip_broadcast(t, mask, |a, m| if m != T::zero() { a * m } else { T::zero() });
        self.push(v, Op::MaskMul { x, mask: mask.clone() })
    }

    /// Selects `indices` along `axis`.
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if axis >= t.ndim() || indices.is_empty() || indices.iter().any(|&i| i >= t.shape()[axis]) {
            return Err(shape_err("gather", format!("axis {axis} of {:?} with {} indices", t.shape(), indices.len())));
        }
        let (outer, a, inner) = split3(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                let base = (o * a + j) * inner;
                out.extend_from_slice(&t.data()[base..base + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        self.push(Tensor::from_parts(shape, out), Op::Gather { x, axis, indices: indices.to_vec() })
    }

    /// `x * sigmoid(x)`, built from catalog operations.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    /// `a / b` for strictly positive `b`, as `a * exp(-log b)`.
    pub fn div_pos(&mut self, a: Var, b: Var) -> Result<Var> {
        let l = self.log(b)?;
        let nl = self.neg(l)?;
        let r = self.exp(nl)?;
        self.mul(a, r)
    }

    /// `sqrt(x + eps)` for nonnegative `x`.
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        let y = self.add_scalar(x, eps)?;
        let l = self.log(y)?;
        let h = self.scale(l, 0.5)?;
        self.exp(h)
    }
}

fn transpose_geom(sx: &[usize], sw: &[usize], stride: usize) -> ConvGeom {
    ConvGeom {
        channels: sw[1],
        height: (sx[2] - 1) * stride + sw[2],
        width: (sx[3] - 1) * stride + sw[3],
        kh: sw[2],
        kw: sw[3],
        stride,
        pad: 0,
    }
}

fn normalize_row<T: Scalar>(row: &[T], eps: T) -> (Vec<T>, T) {
    let d = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    let rstd = T::one() / (var + eps).sqrt();
    (row.iter().map(|&v| (v - mean) * rstd).collect(), rstd)
}

/// Gradient contributions of one recorded operation.
pub(crate) fn backward<T: Scalar>(tape: &Tape<T>, op: &Op<T>, y: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
    let val = |v: Var| tape.value(v);
    let rg = |v: Var| tape.requires_grad(v);
    let like = |t: &Tensor<T>, data: Vec<T>| Tensor::from_parts(t.shape().to_vec(), data);
    let ew = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| like(x, g.data().iter().zip(x.data()).map(|(&gi, &xi)| f(gi, xi)).collect());
    let mut out = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            if rg(*a) {
                out.push((*a, g.clone()));
            }
            if rg(*b) {
                let mut gb = reduce_to_suffix(g.data(), val(*b).shape());
                if matches!(op, Op::Sub(..)) {
                    gb = gb.map(|v| -v);
                }
                out.push((*b, gb));
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if rg(*a) {
                out.push((*a, zip_broadcast(g, tb, |gi, bi| gi * bi)));
            }
            if rg(*b) {
                let prod: Vec<T> = g.data().iter().zip(ta.data()).map(|(&gi, &ai)| gi * ai).collect();
                out.push((*b, reduce_to_suffix(&prod, tb.shape())));
            }
        }
        Op::Scale(a, c) => out.push((*a, g.map(|v| v * *c))),
        Op::AddScalar(a) => out.push((*a, g.clone())),
        Op::Exp(a) => out.push((*a, ew(y, &|gi, yi| gi * yi))),
        Op::Log(a) => out.push((*a, ew(val(*a), &|gi, xi| gi / xi))),
        Op::Sigmoid(a) => out.push((*a, ew(y, &|gi, yi| gi * yi * (T::one() - yi)))),
        Op::Softplus(a) => out.push((*a, ew(val(*a), &|gi, xi| gi * sigmoid(xi)))),
        Op::Tanh(a) => out.push((*a, ew(y, &|gi, yi| gi * (T::one() - yi * yi)))),
        Op::Abs(a) => out.push((
            *a,
            ew(val(*a), &|gi, xi| {
                if xi > T::zero() {
                    gi
                } else if xi < T::zero() {
                    -gi
                } else {
                    T::zero()
                }
            }),
        )),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if rg(*a) {
                let mut ga = vec![T::zero(); m * k];
                gemm(Mat::new(g.data(), m, n), Mat::new(tb.data(), k, n).t(), T::zero(), &mut ga);
                out.push((*a, like(ta, ga)));
            }
            if rg(*b) {
                let mut gb = vec![T::zero(); k * n];
                gemm(Mat::new(ta.data(), m, k).t(), Mat::new(g.data(), m, n), T::zero(), &mut gb);
                out.push((*b, like(tb, gb)));
            }
        }
        Op::BatchMatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
            let small = m * k * n <= 512;
            let mut ga = vec![T::zero(); if rg(*a) { bs * m * k } else { 0 }];
            let mut gb = vec![T::zero(); if rg(*b) { bs * k * n } else { 0 }];
            for i in 0..bs {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                if !ga.is_empty() {
                    let o = &mut ga[i * m * k..(i + 1) * m * k];
                    if small {
                        naive_bmm(gi, bi, (m, n, k), false, true, o);
                    } else {
                        gemm(Mat::new(gi, m, n), Mat::new(bi, k, n).t(), T::zero(), o);
                    }
                }
                if !gb.is_empty() {
                    let o = &mut gb[i * k * n..(i + 1) * k * n];
                    if small {
                        naive_bmm(ai, gi, (k, m, n), true, false, o);
                    } else {
                        gemm(Mat::new(ai, m, k).t(), Mat::new(gi, m, n), T::zero(), o);
                    }
                }
            }
            if !ga.is_empty() {
                out.push((*a, like(ta, ga)));
            }
            if !gb.is_empty() {
                out.push((*b, like(tb, gb)));
            }
        }
        Op::Softmax(a) => {
            let d = *y.shape().last().expect("softmax rank");
            let mut gx = vec![T::zero(); y.numel()];
            for ((gr, yr), o) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    o[j] = yr[j] * (gr[j] - dot);
                }
            }
            out.push((*a, like(y, gx)));
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let tx = val(*x);
            let d = *tx.shape().last().expect("layer_norm rank");
            let gam = val(*gamma).data();
            let mut gx = vec![T::zero(); tx.numel()];
            let mut ggam = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            let dn = T::lit(d as f64);
            for ((xr, gr), o) in tx.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                let (xhat, rstd) = normalize_row(xr, *eps);
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                for j in 0..d {
                    let dxh = gr[j] * gam[j];
                    mean_dxhat = mean_dxhat + dxh;
                    mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[j];
                    ggam[j] = ggam[j] + gr[j] * xhat[j];
                    gbeta[j] = gbeta[j] + gr[j];
                }
                mean_dxhat = mean_dxhat / dn;
                mean_dxhat_xhat = mean_dxhat_xhat / dn;
                for j in 0..d {
                    o[j] = rstd * (gr[j] * gam[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            if rg(*x) {
                out.push((*x, like(tx, gx)));
            }
            if rg(*gamma) {
                out.push((*gamma, Tensor::from_parts(vec![d], ggam)));
            }
            if rg(*beta) {
                out.push((*beta, Tensor::from_parts(vec![d], gbeta)));
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (tx, tw) = (val(*x), val(*w));
            let (sx, sw) = (tx.shape(), tw.shape());
            let geo = ConvGeom { channels: sx[1], height: sx[2], width: sx[3], kh: sw[2], kw: sw[3], stride: *stride, pad: *pad };
            let (o, ckk, ohw, chw) = (sw[0], geo.col_rows(), geo.col_cols(), sx[1] * sx[2] * sx[3]);
            let mut gx = vec![T::zero(); if rg(*x) { tx.numel() } else { 0 }];
            let mut gw = vec![T::zero(); if rg(*w) { tw.numel() } else { 0 }];
            for n in 0..sx[0] {
                let gn = &g.data()[n * o * ohw..(n + 1) * o * ohw];
                if !gw.is_empty() {
                    let cols = im2col(&tx.data()[n * chw..(n + 1) * chw], geo);
                    gemm(Mat::new(gn, o, ohw), Mat::new(&cols, ckk, ohw).t(), T::one(), &mut gw);
                }
                if !gx.is_empty() {
                    let mut dcols = vec![T::zero(); ckk * ohw];
                    gemm(Mat::new(tw.data(), o, ckk).t(), Mat::new(gn, o, ohw), T::zero(), &mut dcols);
                    gx[n * chw..(n + 1) * chw].copy_from_slice(&col2im(&dcols, geo));
                }
            }
            if !gx.is_empty() {
                out.push((*x, like(tx, gx)));
            }
            if !gw.is_empty() {
                out.push((*w, like(tw, gw)));
            }
            if let Some(b) = b.filter(|b| rg(*b)) {
                out.push((b, channel_sum(g, o)));
            }
        }
        Op::ConvTranspose2d { x, w, b, stride } => {
            let (tx, tw) = (val(*x), val(*w));
            let (sx, sw) = (tx.shape(), tw.shape());
            let geo = transpose_geom(sx, sw, *stride);
            let (i_ch, o) = (sw[0], sw[1]);
            let (hw, okk, out_hw) = (sx[2] * sx[3], geo.col_rows(), geo.height * geo.width);
            let mut gx = vec![T::zero(); if rg(*x) { tx.numel() } else { 0 }];
            let mut gw = vec![T::zero(); if rg(*w) { tw.numel() } else { 0 }];
            for n in 0..sx[0] {
                let gcols = im2col(&g.data()[n * o * out_hw..(n + 1) * o * out_hw], geo);
                if !gx.is_empty() {
                    gemm(Mat::new(tw.data(), i_ch, okk), Mat::new(&gcols, okk, hw), T::zero(), &mut gx[n * i_ch * hw..(n + 1) * i_ch * hw]);
                }
                if !gw.is_empty() {
                    let xn = &tx.data()[n * i_ch * hw..(n + 1) * i_ch * hw];
                    gemm(Mat::new(xn, i_ch, hw), Mat::new(&gcols, okk, hw).t(), T::one(), &mut gw);
                }
            }
            if !gx.is_empty() {
                out.push((*x, like(tx, gx)));
            }
            if !gw.is_empty() {
                out.push((*w, like(tw, gw)));
            }
            if let Some(b) = b.filter(|b| rg(*b)) {
                out.push((b, channel_sum(g, o)));
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split3(y.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let t = val(v);
                let len = t.shape()[*axis];
                if rg(v) {
                    let mut gv = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    out.push((v, like(t, gv)));
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let t = val(*x);
            let (outer, a, inner) = split3(t.shape(), *axis);
            let len = y.shape()[*axis];
            let mut gx = vec![T::zero(); t.numel()];
            for o in 0..outer {
                let dst = o * a * inner + start * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            out.push((*x, like(t, gx)));
        }
        Op::Reshape(x) => out.push((*x, like(val(*x), g.data().to_vec()))),
        Op::Permute { x, axes } => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let (data, shape) = permute_data(g.data(), g.shape(), &inv);
            out.push((*x, Tensor::from_parts(shape, data)));
        }
        Op::SumAll(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
        Op::MeanAll(x) => {
            let t = val(*x);
            out.push((*x, Tensor::full(t.shape(), g.item() / T::lit(t.numel() as f64))));
        }
        Op::SumAxis { x, axis } => {
            let t = val(*x);
            let (outer, a, inner) = split3(t.shape(), *axis);
            let mut gx = vec![T::zero(); t.numel()];
            for o in 0..outer {
                for k in 0..a {
                    for i in 0..inner {
                        gx[(o * a + k) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            out.push((*x, like(t, gx)));
        }
        Op::MaxAll { x, argmax } => {
            let mut gx = Tensor::zeros(val(*x).shape());
            gx.data_mut()[*argmax] = g.item();
            out.push((*x, gx));
        }
        Op::MaskMul { x, mask } => {
            out.push((*x, zip_broadcast(g, mask, |gi, m| if m != T::zero() { gi * m } else { T::zero() })));
        }
        Op::Gather { x, axis, indices } => {
            let t = val(*x);
            let (outer, a, inner) = split3(t.shape(), *axis);
            let mut gx = vec![T::zero(); t.numel()];
            let k = indices.len();
            for o in 0..outer {
                for (jj, &j) in indices.iter().enumerate() {
                    let src = (o * k + jj) * inner;
                    let dst = (o * a + j) * inner;
                    for i in 0..inner {
                        gx[dst + i] = gx[dst + i] + g.data()[src + i];
                    }
                }
            }
            out.push((*x, like(t, gx)));
        }
        Op::Custom { inputs, op } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
            let grads = op.backward(&vals, y, g)?;
            if grads.len() != inputs.len() {
                return Err(shape_err("custom", format!("{} returned {} gradients for {} inputs", op.name(), grads.len(), inputs.len())));
            }
            for (&v, gv) in inputs.iter().zip(grads) {
                if let Some(gv) = gv {
                    if gv.shape() != val(v).shape() {
                        return Err(shape_err("custom", format!("{} gradient shape {:?}", op.name(), gv.shape())));
                    }
                    out.push((v, gv));
                }
            }
        }
    }
    Ok(out)
}

fn channel_sum<T: Scalar>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let s = g.shape();
    let hw = s[2] * s[3];
    let mut out = vec![T::zero(); channels];
    for n in 0..s[0] {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (n * channels + c) * hw;
            *o = *o + g.data()[base..base + hw].iter().copied().sum::<T>();
        }
    }
    Tensor::from_parts(vec![channels], out)
}
