//! Dense row-major tensors (last axis fastest) and the raw kernels behind the
//! tape ops. Image-like tensors use channels-last layout `[d0, d1, channels]`.

use crate::error::{Error, Result};

use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Extract the single value of a rank-0/one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut st = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            st[i] = st[i + 1] * self.shape[i + 1];
        }
        st
    }

    pub fn at(&self, idx: &[usize]) -> S {
        debug_assert_eq!(idx.len(), self.shape.len());
        let st = self.strides();
        let flat: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn set(&mut self, idx: &[usize], v: S) {
        let st = self.strides();
        let flat: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[flat] = v;
    }

    /// Explicit NaN/Inf check; detection is never silent.
    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, a: S) -> Tensor<S> {
        self.map(|v| v * a)
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn clamp01(&self) -> Tensor<S> {
        self.map(|v| v.max(S::zero()).min(S::one()))
    }

    /// Cast element type; used at the f32 file boundary.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Padding behavior for the convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// No padding; output shrinks by `k-1`.
    Valid,
    /// Zero padding keeping spatial dims (odd kernels).
    Same,
    /// Cyclic (wrap-around) padding keeping spatial dims.
    Cyclic,
}

fn resolve_src(i: isize, n: usize, pad: Pad) -> Option<usize> {
    match pad {
        Pad::Valid | Pad::Same => {
            if i >= 0 && (i as usize) < n {
                Some(i as usize)
            } else {
                None
            }
        }
        Pad::Cyclic => Some(i.rem_euclid(n as isize) as usize),
    }
}

pub fn conv2d_out_dims(h: usize, w: usize, kh: usize, kw: usize, pad: Pad) -> (usize, usize) {
    match pad {
        Pad::Valid => (h - kh + 1, w - kw + 1),
        Pad::Same | Pad::Cyclic => (h, w),
    }
}

/// Direct-loop 2-D convolution (cross-correlation), stride 1.
/// Input `[h, w, ic]`, kernel `[kh, kw, ic, oc]`, output `[oh, ow, oc]`.
/// This is the slow reference path; `conv2d_im2col` must agree with it.
pub fn conv2d_direct<S: Scalar>(x: &Tensor<S>, k: &Tensor<S>, pad: Pad) -> Tensor<S> {
    let (h, w, ic) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, kic, oc) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    debug_assert_eq!(ic, kic);
    let (oh, ow) = conv2d_out_dims(h, w, kh, kw, pad);
    let (ph, pw) = pad_offsets(kh, kw, pad);
    let mut out = Tensor::zeros(&[oh, ow, oc]);
    let xd = x.data();
    let kd = k.data();
    let od = out.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            for di in 0..kh {
                let si = i as isize + di as isize - ph;
                let Some(si) = resolve_src(si, h, pad) else { continue };
                for dj in 0..kw {
                    let sj = j as isize + dj as isize - pw;
                    let Some(sj) = resolve_src(sj, w, pad) else { continue };
                    let xbase = (si * w + sj) * ic;
                    let kbase = (di * kw + dj) * ic * oc;
                    let obase = (i * ow + j) * oc;
                    for c in 0..ic {
                        let xv = xd[xbase + c];
                        let krow = kbase + c * oc;
                        for o in 0..oc {
                            od[obase + o] += xv * kd[krow + o];
                        }
                    }
                }
            }
        }
    }
    out
}

fn pad_offsets(kh: usize, kw: usize, pad: Pad) -> (isize, isize) {
    match pad {
        Pad::Valid => (0, 0),
        Pad::Same | Pad::Cyclic => ((kh / 2) as isize, (kw / 2) as isize),
    }
}

/// im2col patch matrix: `[oh*ow, kh*kw*ic]`.
pub fn im2col<S: Scalar>(x: &Tensor<S>, kh: usize, kw: usize, pad: Pad) -> Tensor<S> {
    let (h, w, ic) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = conv2d_out_dims(h, w, kh, kw, pad);
    let (ph, pw) = pad_offsets(kh, kw, pad);
    let cols = kh * kw * ic;
    let mut out = Tensor::zeros(&[oh * ow, cols]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            let row = (i * ow + j) * cols;
            for di in 0..kh {
                let si = resolve_src(i as isize + di as isize - ph, h, pad);
                for dj in 0..kw {
                    let sj = resolve_src(j as isize + dj as isize - pw, w, pad);
                    if let (Some(si), Some(sj)) = (si, sj) {
                        let xbase = (si * w + sj) * ic;
                        let obase = row + (di * kw + dj) * ic;
                        od[obase..obase + ic].copy_from_slice(&xd[xbase..xbase + ic]);
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add of a patch matrix back onto the input grid (adjoint of im2col).
pub fn col2im<S: Scalar>(
    cols: &Tensor<S>,
    h: usize,
    w: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    pad: Pad,
) -> Tensor<S> {
    let (oh, ow) = conv2d_out_dims(h, w, kh, kw, pad);
    let (ph, pw) = pad_offsets(kh, kw, pad);
    let ncols = kh * kw * ic;
    debug_assert_eq!(cols.shape(), &[oh * ow, ncols]);
    let mut out = Tensor::zeros(&[h, w, ic]);
    let cd = cols.data();
    let od = out.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            let row = (i * ow + j) * ncols;
            for di in 0..kh {
                let si = resolve_src(i as isize + di as isize - ph, h, pad);
                for dj in 0..kw {
                    let sj = resolve_src(j as isize + dj as isize - pw, w, pad);
                    if let (Some(si), Some(sj)) = (si, sj) {
                        let obase = (si * w + sj) * ic;
                        let cbase = row + (di * kw + dj) * ic;
                        for c in 0..ic {
                            od[obase + c] += cd[cbase + c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fast conv path: im2col followed by one matmul.
pub fn conv2d_im2col<S: Scalar>(x: &Tensor<S>, k: &Tensor<S>, pad: Pad) -> Tensor<S> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (kh, kw, kic, oc) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (oh, ow) = conv2d_out_dims(h, w, kh, kw, pad);
    let patches = im2col(x, kh, kw, pad);
    let kmat = Tensor::from_vec(vec![kh * kw * kic, oc], k.data().to_vec()).unwrap();
    let out = matmul(&patches, &kmat);
    Tensor::from_vec(vec![oh, ow, oc], out.into_data()).unwrap()
}

/// Depthwise 3x3-style convolution: input `[h, w, c]`, kernel `[kh, kw, c]`.
pub fn depthwise_conv2d<S: Scalar>(x: &Tensor<S>, k: &Tensor<S>, pad: Pad) -> Tensor<S> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    debug_assert_eq!(k.shape()[2], c);
    let (oh, ow) = conv2d_out_dims(h, w, kh, kw, pad);
    let (ph, pw) = pad_offsets(kh, kw, pad);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let xd = x.data();
    let kd = k.data();
    let od = out.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            let obase = (i * ow + j) * c;
            for di in 0..kh {
                let Some(si) = resolve_src(i as isize + di as isize - ph, h, pad) else {
                    continue;
                };
                for dj in 0..kw {
                    let Some(sj) = resolve_src(j as isize + dj as isize - pw, w, pad) else {
                        continue;
                    };
                    let xbase = (si * w + sj) * c;
                    let kbase = (di * kw + dj) * c;
                    for ch in 0..c {
                        od[obase + ch] += xd[xbase + ch] * kd[kbase + ch];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint pieces of the depthwise convolution, used by the backward rule.
pub fn depthwise_conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    grad_out: &Tensor<S>,
    pad: Pad,
) -> (Tensor<S>, Tensor<S>) {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    let (oh, ow) = conv2d_out_dims(h, w, kh, kw, pad);
    let (ph, pw) = pad_offsets(kh, kw, pad);
    let mut gx = Tensor::zeros(&[h, w, c]);
    let mut gk = Tensor::zeros(&[kh, kw, c]);
    let xd = x.data();
    let kd = k.data();
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    let gkd = gk.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            let obase = (i * ow + j) * c;
            for di in 0..kh {
                let Some(si) = resolve_src(i as isize + di as isize - ph, h, pad) else {
                    continue;
                };
                for dj in 0..kw {
                    let Some(sj) = resolve_src(j as isize + dj as isize - pw, w, pad) else {
                        continue;
                    };
                    let xbase = (si * w + sj) * c;
                    let kbase = (di * kw + dj) * c;
                    for ch in 0..c {
                        let g = gd[obase + ch];
                        gxd[xbase + ch] += g * kd[kbase + ch];
                        gkd[kbase + ch] += g * xd[xbase + ch];
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// 2-D matmul: `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    debug_assert_eq!(ka, kb);
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        for p in 0..ka {
            let av = ad[i * ka + p];
            if av == S::zero() {
                continue;
            }
            let brow = p * n;
            let orow = i * n;
            for j in 0..n {
                od[orow + j] += av * bd[brow + j];
            }
        }
    }
    out
}

/// Transpose of a rank-2 tensor.
pub fn transpose2d<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    let ad = a.data();
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = ad[i * n + j];
        }
    }
    out
}

/// Space-to-depth: `[h, w, c] -> [h/r, w/r, c*r*r]`.
/// Output channel layout: `(di*r + dj)*c + ch` for the sub-pixel at `(di, dj)`.
pub fn pixel_unshuffle<S: Scalar>(x: &Tensor<S>, r: usize) -> Tensor<S> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert!(h % r == 0 && w % r == 0);
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let mut out = Tensor::zeros(&[oh, ow, oc]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            for di in 0..r {
                for dj in 0..r {
                    let xbase = ((i * r + di) * w + (j * r + dj)) * c;
                    let obase = (i * ow + j) * oc + (di * r + dj) * c;
                    od[obase..obase + c].copy_from_slice(&xd[xbase..xbase + c]);
                }
            }
        }
    }
    out
}

/// Depth-to-space, exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<S: Scalar>(x: &Tensor<S>, r: usize) -> Tensor<S> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert!(c % (r * r) == 0);
    let (oh, ow, oc) = (h * r, w * r, c / (r * r));
    let mut out = Tensor::zeros(&[oh, ow, oc]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            for di in 0..r {
                for dj in 0..r {
                    let xbase = (i * w + j) * c + (di * r + dj) * oc;
                    let obase = ((i * r + di) * ow + (j * r + dj)) * oc;
                    od[obase..obase + oc].copy_from_slice(&xd[xbase..xbase + oc]);
                }
            }
        }
    }
    out
}

/// Nearest-neighbor upsample by an integer factor: `[h, w, c] -> [h*f, w*f, c]`.
pub fn repeat_upsample<S: Scalar>(x: &Tensor<S>, f: usize) -> Tensor<S> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            let xbase = ((i / f) * w + (j / f)) * c;
            let obase = (i * ow + j) * c;
            od[obase..obase + c].copy_from_slice(&xd[xbase..xbase + c]);
        }
    }
    out
}

/// Block-sum reduction, the adjoint of [`repeat_upsample`].
pub fn block_sum<S: Scalar>(g: &Tensor<S>, f: usize) -> Tensor<S> {
    let (oh, ow, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (h, w) = (oh / f, ow / f);
    let mut out = Tensor::zeros(&[h, w, c]);
    let gd = g.data();
    let od = out.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            let gbase = (i * ow + j) * c;
            let obase = ((i / f) * w + (j / f)) * c;
            for ch in 0..c {
                od[obase + ch] += gd[gbase + ch];
            }
        }
    }
    out
}

/// Numpy-style broadcast of `x` to `target` (left-pad with 1s, expand 1-axes).
pub fn broadcast_to<S: Scalar>(x: &Tensor<S>, target: &[usize]) -> Result<Tensor<S>> {
    let xs = x.shape();
    if xs.len() > target.len() {
        return Err(Error::ShapeMismatch {
            op: "broadcast",
            detail: format!("{:?} has higher rank than target {:?}", xs, target),
        });
    }
    let pad = target.len() - xs.len();
    let mut padded = vec![1usize; target.len()];
    padded[pad..].copy_from_slice(xs);
    for (a, t) in padded.iter().zip(target) {
        if *a != *t && *a != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                detail: format!("{:?} not broadcastable to {:?}", xs, target),
            });
        }
    }
    let mut out = Tensor::zeros(target);
    let n = out.numel();
    let rank = target.len();
    let tstrides = out.strides();
    let mut xstrides = vec![0usize; rank];
    {
        let mut acc = 1usize;
        for d in (0..rank).rev() {
            if padded[d] != 1 {
                xstrides[d] = acc;
                acc *= padded[d];
            }
        }
    }
    let xd = x.data();
    let od = out.data_mut();
    for flat in 0..n {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..rank {
            let coord = rem / tstrides[d];
            rem %= tstrides[d];
            if padded[d] != 1 {
                src += coord * xstrides[d];
            }
        }
        od[flat] = xd[src];
    }
    Ok(out)
}

/// Sum-reduce `g` (shaped `target`) back to `orig_shape`, the adjoint of broadcast.
pub fn reduce_to_shape<S: Scalar>(g: &Tensor<S>, orig_shape: &[usize]) -> Tensor<S> {
    let target = g.shape().to_vec();
    let rank = target.len();
    let pad = rank - orig_shape.len();
    let mut padded = vec![1usize; rank];
    padded[pad..].copy_from_slice(orig_shape);

    let mut out = Tensor::zeros(orig_shape);
    let tstrides = g.strides();
    let mut xstrides = vec![0usize; rank];
    {
        let mut acc = 1usize;
        for d in (0..rank).rev() {
            if padded[d] != 1 {
                xstrides[d] = acc;
                acc *= padded[d];
            }
        }
    }
    let gd = g.data();
    let od = out.data_mut();
    for flat in 0..g.numel() {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..rank {
            let coord = rem / tstrides[d];
            rem %= tstrides[d];
            if padded[d] != 1 {
                src += coord * xstrides[d];
            }
        }
        od[src] += gd[flat];
    }
    out
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::InvalidArgument(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    let mut out_shape = first.shape().to_vec();
    let mut axis_total = 0usize;
    for p in parts {
        if p.shape().len() != rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("rank mismatch {:?} vs {:?}", first.shape(), p.shape()),
            });
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {d}", first.shape(), p.shape()),
                });
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let mut axis_off = 0usize;
    for p in parts {
        let pa = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let src = o * pa * inner;
            let dst = (o * axis_total + axis_off) * inner;
            od[dst..dst + pa * inner].copy_from_slice(&pd[src..src + pa * inner]);
        }
        axis_off += pa;
    }
    Ok(out)
}

/// Split `g` along `axis` into chunks of the given extents (adjoint of concat).
pub fn split<S: Scalar>(g: &Tensor<S>, axis: usize, extents: &[usize]) -> Vec<Tensor<S>> {
    let shape = g.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_total = shape[axis];
    let gd = g.data();
    let mut parts = Vec::with_capacity(extents.len());
    let mut axis_off = 0usize;
    for &e in extents {
        let mut shape_p = shape.to_vec();
        shape_p[axis] = e;
        let mut t = Tensor::zeros(&shape_p);
        let td = t.data_mut();
        for o in 0..outer {
            let src = (o * axis_total + axis_off) * inner;
            let dst = o * e * inner;
            td[dst..dst + e * inner].copy_from_slice(&gd[src..src + e * inner]);
        }
        axis_off += e;
        parts.push(t);
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::rng::{rand_normal, Rng};

    #[test]
    fn shape_data_invariant() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let a: Tensor<f64> = rand_normal(&mut Rng::new(3), &[3, 3]);
        let out = matmul(&eye, &a);
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn conv_direct_matches_bruteforce_4x4() {
        // 4x4 image, 3x3 kernel, valid padding -> 2x2 of sliding dot products.
        let x: Tensor<f64> = rand_normal(&mut Rng::new(11), &[4, 4, 1]);
        let k: Tensor<f64> = rand_normal(&mut Rng::new(12), &[3, 3, 1, 1]);
        let out = conv2d_direct(&x, &k, Pad::Valid);
        assert_eq!(out.shape(), &[2, 2, 1]);
        for i in 0..2 {
            for j in 0..2 {
                let mut want = 0.0;
                for di in 0..3 {
                    for dj in 0..3 {
                        want += x.at(&[i + di, j + dj, 0]) * k.at(&[di, dj, 0, 0]);
                    }
                }
                assert!((out.at(&[i, j, 0]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_im2col_agrees_with_direct() {
        let mut rng = Rng::new(77);
        for pad in [Pad::Valid, Pad::Same, Pad::Cyclic] {
            let x: Tensor<f64> = rand_normal(&mut rng, &[6, 5, 3]);
            let k: Tensor<f64> = rand_normal(&mut rng, &[3, 3, 3, 4]);
            let a = conv2d_direct(&x, &k, pad);
            let b = conv2d_im2col(&x, &k, pad);
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-6, "pad {pad:?}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn pixel_shuffle_roundtrip_exact() {
        let x: Tensor<f32> = rand_normal(&mut Rng::new(5), &[8, 8, 3]);
        for r in [2usize, 4] {
            let u = pixel_unshuffle(&x, r);
            let back = pixel_shuffle(&u, r);
            assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint_shapes() {
        let x: Tensor<f64> = rand_normal(&mut Rng::new(6), &[3]);
        let b = broadcast_to(&x, &[2, 4, 3]).unwrap();
        assert_eq!(b.shape(), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for c in 0..3 {
                    assert_eq!(b.at(&[i, j, c]), x.at(&[c]));
                }
            }
        }
        let g: Tensor<f64> = rand_normal(&mut Rng::new(7), &[2, 4, 3]);
        let r = reduce_to_shape(&g, &[3]);
        for c in 0..3 {
            let mut want = 0.0;
            for i in 0..2 {
                for j in 0..4 {
                    want += g.at(&[i, j, c]);
                }
            }
            assert!((r.at(&[c]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let a: Tensor<f64> = rand_normal(&mut Rng::new(8), &[2, 3, 2]);
        let b: Tensor<f64> = rand_normal(&mut Rng::new(9), &[2, 1, 2]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        let parts = split(&c, 1, &[3, 1]);
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn concat_shape_mismatch_is_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[3, 3]);
        assert!(concat(&[&a, &b], 1).is_err());
    }

    #[test]
    fn finite_check_catches_nan() {
        let mut t = Tensor::<f32>::zeros(&[2]);
        t.data_mut()[1] = f32::NAN;
        assert!(t.assert_finite("test").is_err());
        assert!(Tensor::<f32>::ones(&[2]).assert_finite("test").is_ok());
    }
}
