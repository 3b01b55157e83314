//! Single-threaded Wengert tape. Ops compute eagerly and record a node; a
//! backward pass walks the nodes in reverse creation order (a valid reverse
//! topological order by construction), accumulates parameter gradients into
//! the [`ParamStore`], and clears the tape. One tape per training step.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sensing::SensingSystem;

use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::{self, Pad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Const,
    Param(String),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, S),
    Matmul(ValueId, ValueId),
    Conv2d { x: ValueId, k: ValueId, pad: Pad },
    DepthwiseConv2d { x: ValueId, k: ValueId, pad: Pad },
    Relu(ValueId),
    Gelu(ValueId),
    Sigmoid(ValueId),
    Abs(ValueId),
    ClampUnit(ValueId),
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId, eps: S },
    SumAll(ValueId),
    MeanAll(ValueId),
    Broadcast(ValueId),
    Reshape(ValueId),
    Concat { parts: Vec<ValueId>, axis: usize },
    PixelUnshuffle { x: ValueId, r: usize },
    PixelShuffle { x: ValueId, r: usize },
    RepeatUpsample { x: ValueId, f: usize },
    Transpose2d(ValueId),
    SensingForward { x: ValueId, sys: Arc<SensingSystem<S>> },
    SensingPinv { y: ValueId, sys: Arc<SensingSystem<S>> },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c0 * (S::one() + three * c1 * x * x)
}

fn sigmoid_fwd<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> ValueId {
        self.push(Op::Const, t)
    }

    pub fn scalar(&mut self, v: S) -> ValueId {
        self.push(Op::Const, Tensor::scalar(v))
    }

    /// Leaf bound to a named parameter; backward accumulates into its slot.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<ValueId> {
        let value = store.value(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), value))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: ValueId,
        b: ValueId,
    ) -> Result<(Vec<usize>, Vec<S>, Vec<S>)> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        Ok((ta.shape().to_vec(), ta.data().to_vec(), tb.data().to_vec()))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, da, db) = self.binary_same_shape("add", a, b)?;
        let data = da.iter().zip(&db).map(|(&x, &y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), Tensor::from_vec(shape, data)?))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, da, db) = self.binary_same_shape("sub", a, b)?;
        let data = da.iter().zip(&db).map(|(&x, &y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), Tensor::from_vec(shape, data)?))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, da, db) = self.binary_same_shape("mul", a, b)?;
        let data = da.iter().zip(&db).map(|(&x, &y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), Tensor::from_vec(shape, data)?))
    }

    pub fn scale(&mut self, a: ValueId, alpha: S) -> ValueId {
        let v = self.value(a).scale(alpha);
        self.push(Op::Scale(a, alpha), v)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let v = tensor::matmul(self.value(a), self.value(b));
        Ok(self.push(Op::Matmul(a, b), v))
    }

    /// Convolution, stride 1, channels last. Input `[h,w,ic]`, kernel `[kh,kw,ic,oc]`.
    pub fn conv2d(&mut self, x: ValueId, k: ValueId, pad: Pad) -> Result<ValueId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[2] != sk[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, kernel {:?}", sx, sk),
            });
        }
        if pad == Pad::Valid && (sx[0] < sk[0] || sx[1] < sk[1]) {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("valid padding needs input {:?} >= kernel {:?}", sx, sk),
            });
        }
        let v = tensor::conv2d_im2col(self.value(x), self.value(k), pad);
        Ok(self.push(Op::Conv2d { x, k, pad }, v))
    }

    /// Depthwise convolution. Input `[h,w,c]`, kernel `[kh,kw,c]`.
    pub fn depthwise_conv2d(&mut self, x: ValueId, k: ValueId, pad: Pad) -> Result<ValueId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sx[2] != sk[2] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                detail: format!("input {:?}, kernel {:?}", sx, sk),
            });
        }
        let v = tensor::depthwise_conv2d(self.value(x), self.value(k), pad);
        Ok(self.push(Op::DepthwiseConv2d { x, k, pad }, v))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(|a| a.max(S::zero()));
        self.push(Op::Relu(x), v)
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(gelu_fwd);
        self.push(Op::Gelu(x), v)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(sigmoid_fwd);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(|a| a.abs());
        self.push(Op::Abs(x), v)
    }

    pub fn clamp_unit(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).clamp01();
        self.push(Op::ClampUnit(x), v)
    }

    /// Layer norm over the last axis; `gamma`/`beta` have that axis's extent.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: S,
    ) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::ShapeMismatch {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} vs last axis {}",
                    self.shape(gamma),
                    self.shape(beta),
                    d
                ),
            });
        }
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let rows = xs.len() / d;
        let mut out = vec![S::zero(); xs.len()];
        let dn = S::from_usize(d);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mut mu = S::zero();
            for &v in row {
                mu += v;
            }
            mu = mu / dn;
            let mut var = S::zero();
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var = var / dn;
            let inv = S::one() / (var + eps).sqrt();
            for i in 0..d {
                let xhat = (row[i] - mu) * inv;
                out[r * d + i] = xhat * gs[i] + bs[i];
            }
        }
        let v = Tensor::from_vec(sx, out)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, v))
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), v)
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / S::from_usize(t.numel()));
        self.push(Op::MeanAll(x), v)
    }

    pub fn broadcast(&mut self, x: ValueId, target: &[usize]) -> Result<ValueId> {
        let v = tensor::broadcast_to(self.value(x), target)?;
        Ok(self.push(Op::Broadcast(x), v))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", t.shape(), shape),
            });
        }
        let v = Tensor::from_vec(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat(&tensors, axis)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            v,
        ))
    }

    pub fn pixel_unshuffle(&mut self, x: ValueId, r: usize) -> Result<ValueId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] % r != 0 || s[1] % r != 0 {
            return Err(Error::ShapeMismatch {
                op: "pixel_unshuffle",
                detail: format!("{:?} not divisible by r={r}", s),
            });
        }
        let v = tensor::pixel_unshuffle(self.value(x), r);
        Ok(self.push(Op::PixelUnshuffle { x, r }, v))
    }

    pub fn pixel_shuffle(&mut self, x: ValueId, r: usize) -> Result<ValueId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[2] % (r * r) != 0 {
            return Err(Error::ShapeMismatch {
                op: "pixel_shuffle",
                detail: format!("{:?} channels not divisible by r*r={}", s, r * r),
            });
        }
        let v = tensor::pixel_shuffle(self.value(x), r);
        Ok(self.push(Op::PixelShuffle { x, r }, v))
    }

    pub fn repeat_upsample(&mut self, x: ValueId, f: usize) -> Result<ValueId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "repeat_upsample",
                detail: format!("{:?} must be rank 3", s),
            });
        }
        let v = tensor::repeat_upsample(self.value(x), f);
        Ok(self.push(Op::RepeatUpsample { x, f }, v))
    }

    pub fn transpose2d(&mut self, x: ValueId) -> Result<ValueId> {
        if self.shape(x).len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2d",
                detail: format!("{:?} must be rank 2", self.shape(x)),
            });
        }
        let v = tensor::transpose2d(self.value(x));
        Ok(self.push(Op::Transpose2d(x), v))
    }

    /// Apply the sensing operator (cube -> measurement) as a differentiable op.
    pub fn sensing_forward(&mut self, sys: &Arc<SensingSystem<S>>, x: ValueId) -> Result<ValueId> {
        let v = sys.forward_raw(self.value(x))?;
        Ok(self.push(Op::SensingForward { x, sys: Arc::clone(sys) }, v))
    }

    /// Apply the pseudoinverse (measurement -> cube) as a differentiable op.
    pub fn sensing_pinv(&mut self, sys: &Arc<SensingSystem<S>>, y: ValueId) -> Result<ValueId> {
        let v = sys.pinv_raw(self.value(y))?;
        Ok(self.push(Op::SensingPinv { y, sys: Arc::clone(sys) }, v))
    }

    /// Reverse pass from a scalar loss; accumulates parameter gradients into
    /// `params` and clears the tape.
    pub fn backward(&mut self, loss: ValueId, params: &mut ParamStore<S>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on empty tape".into()));
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(name) => {
                    let name = name.clone();
                    params.accumulate_grad(&name, &g)?;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, b, g.scale(-S::one()));
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.zip(&self.nodes[b.0].value, |x, y| x * y)?;
                    let gb = g.zip(&self.nodes[a.0].value, |x, y| x * y)?;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Scale(a, alpha) => {
                    let (a, alpha) = (*a, *alpha);
                    accumulate(&mut grads, a, g.scale(alpha));
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bt = tensor::transpose2d(&self.nodes[b.0].value);
                    let at = tensor::transpose2d(&self.nodes[a.0].value);
                    let ga = tensor::matmul(&g, &bt);
                    let gb = tensor::matmul(&at, &g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Conv2d { x, k, pad } => {
                    let (x, k, pad) = (*x, *k, *pad);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let ks = self.nodes[k.0].value.shape().to_vec();
                    let (kh, kw, ic, oc) = (ks[0], ks[1], ks[2], ks[3]);
                    let (oh, ow) = (g.shape()[0], g.shape()[1]);
                    let g2 = Tensor::from_vec(vec![oh * ow, oc], g.data().to_vec())?;
                    let patches = tensor::im2col(&self.nodes[x.0].value, kh, kw, pad);
                    // dK = P^T g
                    let pt = tensor::transpose2d(&patches);
                    let gk2 = tensor::matmul(&pt, &g2);
                    let gk = Tensor::from_vec(vec![kh, kw, ic, oc], gk2.into_data())?;
                    // dX = col2im(g K^T)
                    let k2 = Tensor::from_vec(
                        vec![kh * kw * ic, oc],
                        self.nodes[k.0].value.data().to_vec(),
                    )?;
                    let kt = tensor::transpose2d(&k2);
                    let gcols = tensor::matmul(&g2, &kt);
                    let gx = tensor::col2im(&gcols, xs[0], xs[1], ic, kh, kw, pad);
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, k, gk);
                }
                Op::DepthwiseConv2d { x, k, pad } => {
                    let (x, k, pad) = (*x, *k, *pad);
                    let (gx, gk) = tensor::depthwise_conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[k.0].value,
                        &g,
                        pad,
                    );
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, k, gk);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let gx = g.zip(&self.nodes[x.0].value, |gv, xv| {
                        if xv > S::zero() {
                            gv
                        } else {
                            S::zero()
                        }
                    })?;
                    accumulate(&mut grads, x, gx);
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let gx = g.zip(&self.nodes[x.0].value, |gv, xv| gv * gelu_bwd(xv))?;
                    accumulate(&mut grads, x, gx);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    // value holds s(x)
                    let gx = g.zip(&self.nodes[idx].value, |gv, s| gv * s * (S::one() - s))?;
                    accumulate(&mut grads, x, gx);
                }
                Op::Abs(x) => {
                    let x = *x;
                    let gx = g.zip(&self.nodes[x.0].value, |gv, xv| {
                        if xv > S::zero() {
                            gv
                        } else if xv < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })?;
                    accumulate(&mut grads, x, gx);
                }
                Op::ClampUnit(x) => {
                    let x = *x;
                    let gx = g.zip(&self.nodes[x.0].value, |gv, xv| {
                        if xv > S::zero() && xv < S::one() {
                            gv
                        } else {
                            S::zero()
                        }
                    })?;
                    accumulate(&mut grads, x, gx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let xs = self.nodes[x.0].value.data();
                    let gs = self.nodes[gamma.0].value.data();
                    let d = self.nodes[gamma.0].value.numel();
                    let rows = xs.len() / d;
                    let dn = S::from_usize(d);
                    let mut gx = Tensor::zeros(self.nodes[x.0].value.shape());
                    let mut ggamma = Tensor::zeros(&[d]);
                    let mut gbeta = Tensor::zeros(&[d]);
                    {
                        let gxd = gx.data_mut();
                        let gd = g.data();
                        for r in 0..rows {
                            let row = &xs[r * d..(r + 1) * d];
                            let mut mu = S::zero();
                            for &v in row {
                                mu += v;
                            }
                            mu = mu / dn;
                            let mut var = S::zero();
                            for &v in row {
                                let c = v - mu;
                                var += c * c;
                            }
                            var = var / dn;
                            let inv = S::one() / (var + eps).sqrt();
                            let grow = &gd[r * d..(r + 1) * d];
                            let mut mean_dxhat = S::zero();
                            let mut mean_dxhat_xhat = S::zero();
                            for i in 0..d {
                                let xhat = (row[i] - mu) * inv;
                                let dxhat = grow[i] * gs[i];
                                mean_dxhat += dxhat;
                                mean_dxhat_xhat += dxhat * xhat;
                            }
                            mean_dxhat = mean_dxhat / dn;
                            mean_dxhat_xhat = mean_dxhat_xhat / dn;
                            for i in 0..d {
                                let xhat = (row[i] - mu) * inv;
                                let dxhat = grow[i] * gs[i];
                                gxd[r * d + i] =
                                    inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                                ggamma.data_mut()[i] += grow[i] * xhat;
                                gbeta.data_mut()[i] += grow[i];
                            }
                        }
                    }
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, gamma, ggamma);
                    accumulate(&mut grads, beta, gbeta);
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let gx = Tensor::full(self.nodes[x.0].value.shape(), g.item());
                    accumulate(&mut grads, x, gx);
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let n = S::from_usize(self.nodes[x.0].value.numel());
                    let gx = Tensor::full(self.nodes[x.0].value.shape(), g.item() / n);
                    accumulate(&mut grads, x, gx);
                }
                Op::Broadcast(x) => {
                    let x = *x;
                    let gx = tensor::reduce_to_shape(&g, self.nodes[x.0].value.shape());
                    accumulate(&mut grads, x, gx);
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let gx =
                        Tensor::from_vec(self.nodes[x.0].value.shape().to_vec(), g.into_data())?;
                    accumulate(&mut grads, x, gx);
                }
                Op::Concat { parts, axis } => {
                    let (parts, axis) = (parts.clone(), *axis);
                    let extents: Vec<usize> =
                        parts.iter().map(|p| self.nodes[p.0].value.shape()[axis]).collect();
                    let pieces = tensor::split(&g, axis, &extents);
                    for (p, piece) in parts.iter().zip(pieces) {
                        accumulate(&mut grads, *p, piece);
                    }
                }
                Op::PixelUnshuffle { x, r } => {
                    let (x, r) = (*x, *r);
                    accumulate(&mut grads, x, tensor::pixel_shuffle(&g, r));
                }
                Op::PixelShuffle { x, r } => {
                    let (x, r) = (*x, *r);
                    accumulate(&mut grads, x, tensor::pixel_unshuffle(&g, r));
                }
                Op::RepeatUpsample { x, f } => {
                    let (x, f) = (*x, *f);
                    accumulate(&mut grads, x, tensor::block_sum(&g, f));
                }
                Op::Transpose2d(x) => {
                    let x = *x;
                    accumulate(&mut grads, x, tensor::transpose2d(&g));
                }
                Op::SensingForward { x, sys } => {
                    let (x, sys) = (*x, Arc::clone(sys));
                    let gx = sys.adjoint_raw(&g)?;
                    accumulate(&mut grads, x, gx);
                }
                Op::SensingPinv { y, sys } => {
                    let (y, sys) = (*y, Arc::clone(sys));
                    let gy = sys.pinv_vjp(&g)?;
                    accumulate(&mut grads, y, gy);
                }
            }
        }
        self.nodes.clear();
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: ValueId, g: Tensor<S>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::rng::{rand_normal, Rng};

    fn store64() -> ParamStore<f64> {
        ParamStore::new(123)
    }

    #[test]
    fn add_basic() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::zeros(&[3]));
        let err = t.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn square_sum_gradient() {
        // loss = sum(w * w), w = [1, 2] -> grad = [2, 4]
        let mut ps = store64();
        ps.insert("w", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let mut t = Tape::new();
        let w = t.param(&ps, "w").unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad("w").unwrap().data(), &[2.0, 4.0]);
        assert!(t.is_empty(), "backward clears the tape");
    }

    #[test]
    fn matmul_sum_gradient_is_ones_bt() {
        // loss = sum(A B) -> dA = ones * B^T
        let mut ps = store64();
        let a: Tensor<f64> = rand_normal(&mut Rng::new(1), &[3, 4]);
        let b: Tensor<f64> = rand_normal(&mut Rng::new(2), &[4, 2]);
        ps.insert("a", a.clone(), true).unwrap();
        let mut t = Tape::new();
        let aid = t.param(&ps, "a").unwrap();
        let bid = t.constant(b.clone());
        let prod = t.matmul(aid, bid).unwrap();
        let loss = t.sum_all(prod);
        t.backward(loss, &mut ps).unwrap();
        let ones = Tensor::<f64>::ones(&[3, 2]);
        let want = tensor::matmul(&ones, &tensor::transpose2d(&b));
        for (g, w) in ps.grad("a").unwrap().data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_independent_of_param_gives_zero_grad() {
        let mut ps = store64();
        ps.insert("p", Tensor::ones(&[3]), true).unwrap();
        ps.insert("q", Tensor::ones(&[3]), true).unwrap();
        let mut t = Tape::new();
        let _p = t.param(&ps, "p").unwrap();
        let q = t.param(&ps, "q").unwrap();
        let loss = t.sum_all(q);
        t.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad("p").unwrap().data(), &[0.0; 3]);
        assert_eq!(ps.grad("q").unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut ps = store64();
        ps.insert("w", Tensor::ones(&[2]), true).unwrap();
        let mut t = Tape::new();
        let w = t.param(&ps, "w").unwrap();
        let err = t.backward(w, &mut ps).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn gradient_linearity_disjoint_leaves_exact() {
        // backward(l1 + l2) == backward(l1) + backward(l2), exact in f64
        let w0: Tensor<f64> = rand_normal(&mut Rng::new(10), &[5]);

        let run = |combined: bool| -> Vec<f64> {
            let mut ps = store64();
            ps.insert("w", w0.clone(), true).unwrap();
            if combined {
                let mut t = Tape::new();
                let w = t.param(&ps, "w").unwrap();
                let l1 = t.sum_all(w);
                let w2 = t.param(&ps, "w").unwrap();
                let sq = t.mul(w2, w2).unwrap();
                let l2 = t.sum_all(sq);
                let tot = t.add(l1, l2).unwrap();
                t.backward(tot, &mut ps).unwrap();
            } else {
                let mut t = Tape::new();
                let w = t.param(&ps, "w").unwrap();
                let l1 = t.sum_all(w);
                t.backward(l1, &mut ps).unwrap();
                let mut t = Tape::new();
                let w2 = t.param(&ps, "w").unwrap();
                let sq = t.mul(w2, w2).unwrap();
                let l2 = t.sum_all(sq);
                t.backward(l2, &mut ps).unwrap();
            }
            ps.grad("w").unwrap().data().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn forward_is_pure() {
        let x: Tensor<f64> = rand_normal(&mut Rng::new(4), &[6, 6, 2]);
        let k: Tensor<f64> = rand_normal(&mut Rng::new(5), &[3, 3, 2, 3]);
        let mut t1 = Tape::new();
        let (x1, k1) = (t1.constant(x.clone()), t1.constant(k.clone()));
        let c1 = t1.conv2d(x1, k1, Pad::Same).unwrap();
        let mut t2 = Tape::new();
        let (x2, k2) = (t2.constant(x), t2.constant(k));
        let c2 = t2.conv2d(x2, k2, Pad::Same).unwrap();
        assert_eq!(t1.value(c1).data(), t2.value(c2).data());
    }
}
