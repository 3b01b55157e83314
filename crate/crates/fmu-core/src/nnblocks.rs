//! Trainable network components: the latent encoder, the U-shaped
//! prior-modulated denoiser, and the velocity networks.
//!
//! All forwards are tape functions: they take value ids, register their
//! parameters as tape leaves, and return value ids, so the same code path
//! serves training and inference.

use crate::error::{Error, Result};
use crate::ndtensor::params::ParamStore;
use crate::ndtensor::scalar::Scalar;
use crate::ndtensor::tape::{Tape, ValueId};
use crate::ndtensor::tensor::{Pad, Tensor};

/// Token matrix `[n, c]` summarizing a cube, with the spatial grid kept for
/// reinjection into the denoiser.
#[derive(Debug, Clone)]
pub struct LatentPrior<S> {
    pub tokens: Tensor<S>,
    pub grid: (usize, usize),
}

fn layer_norm_eps<S: Scalar>() -> S {
    S::from_f64(1e-5)
}

fn conv_std(kh: usize, kw: usize, ic: usize) -> f64 {
    (2.0 / (kh * kw * ic) as f64).sqrt()
}

/// Pointwise/spatial conv + bias, returning the pre-activation.
fn conv_bias<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: ValueId,
    w_name: &str,
    b_name: &str,
    pad: Pad,
) -> Result<ValueId> {
    let w = tape.param(store, w_name)?;
    let b = tape.param(store, b_name)?;
    let y = tape.conv2d(x, w, pad)?;
    let shape = tape.shape(y).to_vec();
    let bb = tape.broadcast(b, &shape)?;
    tape.add(y, bb)
}

fn matmul_bias<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: ValueId,
    w_name: &str,
    b_name: &str,
) -> Result<ValueId> {
    let w = tape.param(store, w_name)?;
    let b = tape.param(store, b_name)?;
    let y = tape.matmul(x, w)?;
    let shape = tape.shape(y).to_vec();
    let bb = tape.broadcast(b, &shape)?;
    tape.add(y, bb)
}

/// Sinusoidal embedding of a time in [0, 1]; frequencies are powers of two.
pub fn time_embedding<S: Scalar>(t: S, dim: usize) -> Tensor<S> {
    debug_assert!(dim % 2 == 0);
    let mut data = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let angle = t.as_f64() * (1u64 << i) as f64 * std::f64::consts::PI;
        data.push(S::from_f64(angle.sin()));
        data.push(S::from_f64(angle.cos()));
    }
    Tensor::from_vec(vec![dim], data).unwrap()
}

// ---------------------------------------------------------------------------
// Latent encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Pixel-unshuffle factor r; spatial dims must be divisible by it.
    pub unshuffle: usize,
    /// Working width after the stem.
    pub width: usize,
    pub mobile_blocks: usize,
    pub mixer_depth: usize,
    /// Output token channels c.
    pub channels: usize,
    /// Cyclic spatial padding keeps the encoder translation-equivariant.
    pub cyclic_pad: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            unshuffle: 4,
            width: 16,
            mobile_blocks: 2,
            mixer_depth: 2,
            channels: 16,
            cyclic_pad: true,
        }
    }
}

/// Pixel-unshuffle stem, MobileBlocks (depthwise 3x3 + pointwise + gelu),
/// then a conv-mixer stack (spatial depthwise mixing + channel MLP, each with
/// layer norm and a residual), and a pointwise head to `channels`.
#[derive(Debug, Clone)]
pub struct LatentEncoder {
    pub cfg: EncoderConfig,
    pub in_channels: usize,
    pub namespace: String,
}

impl LatentEncoder {
    pub fn new(cfg: EncoderConfig, in_channels: usize, namespace: &str) -> Self {
        LatentEncoder {
            cfg,
            in_channels,
            namespace: namespace.to_string(),
        }
    }

    fn pad(&self) -> Pad {
        if self.cfg.cyclic_pad {
            Pad::Cyclic
        } else {
            Pad::Same
        }
    }

    pub fn register_params<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let ns = &self.namespace;
        let r = self.cfg.unshuffle;
        let w = self.cfg.width;
        let ic = self.in_channels * r * r;
        store.init_normal(&format!("{ns}.stem.w"), &[1, 1, ic, w], conv_std(1, 1, ic))?;
        store.init_zeros(&format!("{ns}.stem.b"), &[w])?;
        for i in 0..self.cfg.mobile_blocks {
            store.init_normal(&format!("{ns}.mb{i}.dw"), &[3, 3, w], conv_std(3, 3, 1))?;
            store.init_normal(&format!("{ns}.mb{i}.pw.w"), &[1, 1, w, w], conv_std(1, 1, w))?;
            store.init_zeros(&format!("{ns}.mb{i}.pw.b"), &[w])?;
        }
        for i in 0..self.cfg.mixer_depth {
            store.init_const(&format!("{ns}.mix{i}.ln1.g"), &[w], S::one())?;
            store.init_zeros(&format!("{ns}.mix{i}.ln1.b"), &[w])?;
            store.init_normal(&format!("{ns}.mix{i}.dw"), &[3, 3, w], conv_std(3, 3, 1))?;
            store.init_const(&format!("{ns}.mix{i}.ln2.g"), &[w], S::one())?;
            store.init_zeros(&format!("{ns}.mix{i}.ln2.b"), &[w])?;
            store.init_normal(
                &format!("{ns}.mix{i}.ch1.w"),
                &[1, 1, w, 2 * w],
                conv_std(1, 1, w),
            )?;
            store.init_zeros(&format!("{ns}.mix{i}.ch1.b"), &[2 * w])?;
            store.init_normal(
                &format!("{ns}.mix{i}.ch2.w"),
                &[1, 1, 2 * w, w],
                conv_std(1, 1, 2 * w),
            )?;
            store.init_zeros(&format!("{ns}.mix{i}.ch2.b"), &[w])?;
        }
        let c = self.cfg.channels;
        store.init_normal(&format!("{ns}.head.w"), &[1, 1, w, c], conv_std(1, 1, w))?;
        store.init_zeros(&format!("{ns}.head.b"), &[c])?;
        // normalized tokens keep the prior scale-matched to the flow's
        // standard-normal noise end
        store.init_const(&format!("{ns}.out_ln.g"), &[c], S::one())?;
        store.init_zeros(&format!("{ns}.out_ln.b"), &[c])?;
        Ok(())
    }

    /// Tokens `[n, c]` plus the token grid `(W/r, H/r)`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        input: ValueId,
    ) -> Result<(ValueId, (usize, usize))> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: format!(
                    "input {:?} vs expected channels {}",
                    shape, self.in_channels
                ),
            });
        }
        let r = self.cfg.unshuffle;
        if shape[0] % r != 0 || shape[1] % r != 0 {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: format!("extents {:?} not divisible by unshuffle {r}", &shape[..2]),
            });
        }
        let ns = self.namespace.clone();
        let pad = self.pad();
        let eps = layer_norm_eps::<S>();

        let mut x = tape.pixel_unshuffle(input, r)?;
        x = conv_bias(tape, store, x, &format!("{ns}.stem.w"), &format!("{ns}.stem.b"), Pad::Valid)?;
        x = tape.gelu(x);

        for i in 0..self.cfg.mobile_blocks {
            let dw = tape.param(store, &format!("{ns}.mb{i}.dw"))?;
            let mut h = tape.depthwise_conv2d(x, dw, pad)?;
            h = conv_bias(
                tape,
                store,
                h,
                &format!("{ns}.mb{i}.pw.w"),
                &format!("{ns}.mb{i}.pw.b"),
                Pad::Valid,
            )?;
            h = tape.gelu(h);
            x = tape.add(x, h)?;
        }

        for i in 0..self.cfg.mixer_depth {
            // spatial mixing
            let g1 = tape.param(store, &format!("{ns}.mix{i}.ln1.g"))?;
            let b1 = tape.param(store, &format!("{ns}.mix{i}.ln1.b"))?;
            let n1 = tape.layer_norm(x, g1, b1, eps)?;
            let dw = tape.param(store, &format!("{ns}.mix{i}.dw"))?;
            let mut h = tape.depthwise_conv2d(n1, dw, pad)?;
            h = tape.gelu(h);
            x = tape.add(x, h)?;
            // channel mixing
            let g2 = tape.param(store, &format!("{ns}.mix{i}.ln2.g"))?;
            let b2 = tape.param(store, &format!("{ns}.mix{i}.ln2.b"))?;
            let n2 = tape.layer_norm(x, g2, b2, eps)?;
            let mut h = conv_bias(
                tape,
                store,
                n2,
                &format!("{ns}.mix{i}.ch1.w"),
                &format!("{ns}.mix{i}.ch1.b"),
                Pad::Valid,
            )?;
            h = tape.gelu(h);
            h = conv_bias(
                tape,
                store,
                h,
                &format!("{ns}.mix{i}.ch2.w"),
                &format!("{ns}.mix{i}.ch2.b"),
                Pad::Valid,
            )?;
            x = tape.add(x, h)?;
        }

        let x = conv_bias(tape, store, x, &format!("{ns}.head.w"), &format!("{ns}.head.b"), Pad::Valid)?;
        let g = tape.param(store, &format!("{ns}.out_ln.g"))?;
        let b = tape.param(store, &format!("{ns}.out_ln.b"))?;
        let x = tape.layer_norm(x, g, b, eps)?;
        let (gw, gh) = (shape[0] / r, shape[1] / r);
        let tokens = tape.reshape(x, &[gw * gh, self.cfg.channels])?;
        Ok((tokens, (gw, gh)))
    }
}

/// Encoder over `concat(y_norm, x)`: 2*bands input channels.
pub fn encode<S: Scalar>(
    le: &LatentEncoder,
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    y_norm: ValueId,
    x: ValueId,
) -> Result<(ValueId, (usize, usize))> {
    if tape.shape(y_norm) != tape.shape(x) {
        return Err(Error::ShapeMismatch {
            op: "encode",
            detail: format!("{:?} vs {:?}", tape.shape(y_norm), tape.shape(x)),
        });
    }
    let joined = tape.concat(&[y_norm, x], 2)?;
    le.forward(tape, store, joined)
}

/// Condition encoder over `y_norm` alone: `bands` input channels.
pub fn encode_condition<S: Scalar>(
    le_cond: &LatentEncoder,
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    y_norm: ValueId,
) -> Result<(ValueId, (usize, usize))> {
    le_cond.forward(tape, store, y_norm)
}

// ---------------------------------------------------------------------------
// U-shaped denoiser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    pub base_width: usize,
    /// Token channels of the injected prior.
    pub prior_channels: usize,
    pub cyclic_pad: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_width: 16,
            prior_channels: 16,
            cyclic_pad: true,
        }
    }
}

/// Residual U-shaped denoiser, depth 2 (two pixel-(un)shuffle scalings).
/// The prior modulates features at every level with a feature-wise
/// scale-and-shift computed from spatially re-broadcast tokens. The final
/// conv is zero-initialized, so the denoiser is exactly the identity at init.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub bands: usize,
    pub namespace: String,
    /// Whether modulation heads exist (prior-free baselines drop them).
    pub with_prior: bool,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, bands: usize, namespace: &str, with_prior: bool) -> Self {
        Denoiser {
            cfg,
            bands,
            namespace: namespace.to_string(),
            with_prior,
        }
    }

    fn pad(&self) -> Pad {
        if self.cfg.cyclic_pad {
            Pad::Cyclic
        } else {
            Pad::Same
        }
    }

    pub fn register_params<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let ns = &self.namespace;
        let w = self.cfg.base_width;
        let b = self.bands;
        let c = self.cfg.prior_channels;
        store.init_normal(&format!("{ns}.head.w"), &[3, 3, b, w], conv_std(3, 3, b))?;
        store.init_zeros(&format!("{ns}.head.b"), &[w])?;

        let levels = [w, 2 * w, 4 * w];
        for (li, &cl) in levels.iter().enumerate() {
            store.init_normal(
                &format!("{ns}.l{li}.c1.w"),
                &[3, 3, cl, cl],
                conv_std(3, 3, cl),
            )?;
            store.init_zeros(&format!("{ns}.l{li}.c1.b"), &[cl])?;
            if self.with_prior {
                // modulation heads start silent: (1+s) = 1, b = 0
                store.init_zeros(&format!("{ns}.l{li}.ms.w"), &[1, 1, c, cl])?;
                store.init_zeros(&format!("{ns}.l{li}.ms.b"), &[cl])?;
                store.init_zeros(&format!("{ns}.l{li}.mb.w"), &[1, 1, c, cl])?;
                store.init_zeros(&format!("{ns}.l{li}.mb.b"), &[cl])?;
            }
        }
        // down projections after unshuffle
        store.init_normal(&format!("{ns}.d0.w"), &[1, 1, 4 * w, 2 * w], conv_std(1, 1, 4 * w))?;
        store.init_zeros(&format!("{ns}.d0.b"), &[2 * w])?;
        store.init_normal(&format!("{ns}.d1.w"), &[1, 1, 8 * w, 4 * w], conv_std(1, 1, 8 * w))?;
        store.init_zeros(&format!("{ns}.d1.b"), &[4 * w])?;
        // up projections before shuffle, fusions after skip concat
        store.init_normal(&format!("{ns}.u1.w"), &[1, 1, 4 * w, 8 * w], conv_std(1, 1, 4 * w))?;
        store.init_zeros(&format!("{ns}.u1.b"), &[8 * w])?;
        store.init_normal(&format!("{ns}.f1.w"), &[1, 1, 4 * w, 2 * w], conv_std(1, 1, 4 * w))?;
        store.init_zeros(&format!("{ns}.f1.b"), &[2 * w])?;
        store.init_normal(
            &format!("{ns}.l1u.c1.w"),
            &[3, 3, 2 * w, 2 * w],
            conv_std(3, 3, 2 * w),
        )?;
        store.init_zeros(&format!("{ns}.l1u.c1.b"), &[2 * w])?;
        store.init_normal(&format!("{ns}.u0.w"), &[1, 1, 2 * w, 4 * w], conv_std(1, 1, 2 * w))?;
        store.init_zeros(&format!("{ns}.u0.b"), &[4 * w])?;
        store.init_normal(&format!("{ns}.f0.w"), &[1, 1, 2 * w, w], conv_std(1, 1, 2 * w))?;
        store.init_zeros(&format!("{ns}.f0.b"), &[w])?;
        store.init_normal(
            &format!("{ns}.l0u.c1.w"),
            &[3, 3, w, w],
            conv_std(3, 3, w),
        )?;
        store.init_zeros(&format!("{ns}.l0u.c1.b"), &[w])?;
        // identity at init
        store.init_zeros(&format!("{ns}.out.w"), &[3, 3, w, b])?;
        store.init_zeros(&format!("{ns}.out.b"), &[b])?;
        Ok(())
    }

    fn modulate<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        level: usize,
        f: ValueId,
        prior: Option<(ValueId, (usize, usize))>,
    ) -> Result<ValueId> {
        let Some((tokens, (gw, gh))) = prior else {
            return Ok(f);
        };
        let ns = &self.namespace;
        let fshape = tape.shape(f).to_vec();
        if fshape[0] % gw != 0 || fshape[1] % gh != 0 || fshape[0] / gw != fshape[1] / gh {
            return Err(Error::ShapeMismatch {
                op: "denoise",
                detail: format!("prior grid ({gw},{gh}) does not divide level {:?}", &fshape[..2]),
            });
        }
        let factor = fshape[0] / gw;
        let grid = tape.reshape(tokens, &[gw, gh, self.cfg.prior_channels])?;
        let up = if factor == 1 {
            grid
        } else {
            tape.repeat_upsample(grid, factor)?
        };
        let s = conv_bias(
            tape,
            store,
            up,
            &format!("{ns}.l{level}.ms.w"),
            &format!("{ns}.l{level}.ms.b"),
            Pad::Valid,
        )?;
        let b = conv_bias(
            tape,
            store,
            up,
            &format!("{ns}.l{level}.mb.w"),
            &format!("{ns}.l{level}.mb.b"),
            Pad::Valid,
        )?;
        // f * (1 + s) + b
        let fs = tape.mul(f, s)?;
        let f1 = tape.add(f, fs)?;
        tape.add(f1, b)
    }

    fn block<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        name: &str,
        x: ValueId,
    ) -> Result<ValueId> {
        let ns = &self.namespace;
        let h = conv_bias(
            tape,
            store,
            x,
            &format!("{ns}.{name}.c1.w"),
            &format!("{ns}.{name}.c1.b"),
            self.pad(),
        )?;
        let h = tape.gelu(h);
        tape.add(x, h)
    }

    /// Residual denoise: `x + delta(x, prior)`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: ValueId,
        prior: Option<(ValueId, (usize, usize))>,
    ) -> Result<ValueId> {
        let ns = self.namespace.clone();
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.bands {
            return Err(Error::ShapeMismatch {
                op: "denoise",
                detail: format!("input {:?} vs bands {}", shape, self.bands),
            });
        }
        if shape[0] % 4 != 0 || shape[1] % 4 != 0 {
            return Err(Error::ShapeMismatch {
                op: "denoise",
                detail: format!("spatial dims {:?} must be divisible by 4", &shape[..2]),
            });
        }
        let pad = self.pad();

        let mut f0 = conv_bias(tape, store, x, &format!("{ns}.head.w"), &format!("{ns}.head.b"), pad)?;
        f0 = tape.gelu(f0);
        f0 = self.block(tape, store, "l0", f0)?;
        f0 = self.modulate(tape, store, 0, f0, prior)?;

        let mut f1 = tape.pixel_unshuffle(f0, 2)?;
        f1 = conv_bias(tape, store, f1, &format!("{ns}.d0.w"), &format!("{ns}.d0.b"), Pad::Valid)?;
        f1 = tape.gelu(f1);
        f1 = self.block(tape, store, "l1", f1)?;
        f1 = self.modulate(tape, store, 1, f1, prior)?;

        let mut f2 = tape.pixel_unshuffle(f1, 2)?;
        f2 = conv_bias(tape, store, f2, &format!("{ns}.d1.w"), &format!("{ns}.d1.b"), Pad::Valid)?;
        f2 = tape.gelu(f2);
        f2 = self.block(tape, store, "l2", f2)?;
        f2 = self.modulate(tape, store, 2, f2, prior)?;

        let mut u1 = conv_bias(tape, store, f2, &format!("{ns}.u1.w"), &format!("{ns}.u1.b"), Pad::Valid)?;
        u1 = tape.pixel_shuffle(u1, 2)?;
        let cat1 = tape.concat(&[u1, f1], 2)?;
        let mut g1 = conv_bias(tape, store, cat1, &format!("{ns}.f1.w"), &format!("{ns}.f1.b"), Pad::Valid)?;
        g1 = tape.gelu(g1);
        g1 = self.block(tape, store, "l1u", g1)?;

        let mut u0 = conv_bias(tape, store, g1, &format!("{ns}.u0.w"), &format!("{ns}.u0.b"), Pad::Valid)?;
        u0 = tape.pixel_shuffle(u0, 2)?;
        let cat0 = tape.concat(&[u0, f0], 2)?;
        let mut g0 = conv_bias(tape, store, cat0, &format!("{ns}.f0.w"), &format!("{ns}.f0.b"), Pad::Valid)?;
        g0 = tape.gelu(g0);
        g0 = self.block(tape, store, "l0u", g0)?;

        let delta = conv_bias(tape, store, g0, &format!("{ns}.out.w"), &format!("{ns}.out.b"), pad)?;
        tape.add(x, delta)
    }
}

// ---------------------------------------------------------------------------
// Velocity networks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VelocityVariant {
    /// Default; best PSNR in the denoiser-variant ablation.
    SimpleCnn,
    Mlp,
}

#[derive(Debug, Clone)]
pub struct VelocityConfig {
    pub variant: VelocityVariant,
    /// Token channels c.
    pub channels: usize,
    pub hidden: usize,
    /// Sinusoidal time-embedding width (even).
    pub time_embed: usize,
    pub cyclic_pad: bool,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        VelocityConfig {
            variant: VelocityVariant::SimpleCnn,
            channels: 16,
            hidden: 32,
            time_embed: 8,
            cyclic_pad: true,
        }
    }
}

/// Maps `(z [n,c], t, cond [n,c]) -> [n,c]`. Time enters via a sinusoidal
/// embedding through a learned projection added as a per-channel bias.
#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub cfg: VelocityConfig,
    pub grid: (usize, usize),
    pub namespace: String,
}

impl VelocityNet {
    pub fn new(cfg: VelocityConfig, grid: (usize, usize), namespace: &str) -> Self {
        VelocityNet {
            cfg,
            grid,
            namespace: namespace.to_string(),
        }
    }

    pub fn register_params<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let ns = &self.namespace;
        let c = self.cfg.channels;
        let h = self.cfg.hidden;
        let e = self.cfg.time_embed;
        match self.cfg.variant {
            VelocityVariant::SimpleCnn => {
                store.init_normal(&format!("{ns}.in.w"), &[3, 3, 2 * c, h], conv_std(3, 3, 2 * c))?;
                store.init_zeros(&format!("{ns}.in.b"), &[h])?;
                store.init_normal(&format!("{ns}.t.w"), &[e, h], (1.0 / e as f64).sqrt())?;
                store.init_normal(&format!("{ns}.mid.w"), &[3, 3, h, h], conv_std(3, 3, h))?;
                store.init_zeros(&format!("{ns}.mid.b"), &[h])?;
                store.init_zeros(&format!("{ns}.out.w"), &[3, 3, h, c])?;
                store.init_zeros(&format!("{ns}.out.b"), &[c])?;
            }
            VelocityVariant::Mlp => {
                store.init_normal(&format!("{ns}.l1.w"), &[2 * c, h], (2.0 / (2 * c) as f64).sqrt())?;
                store.init_zeros(&format!("{ns}.l1.b"), &[h])?;
                store.init_normal(&format!("{ns}.t.w"), &[e, h], (1.0 / e as f64).sqrt())?;
                store.init_normal(&format!("{ns}.l2.w"), &[h, h], (2.0 / h as f64).sqrt())?;
                store.init_zeros(&format!("{ns}.l2.b"), &[h])?;
                store.init_zeros(&format!("{ns}.l3.w"), &[h, c])?;
                store.init_zeros(&format!("{ns}.l3.b"), &[c])?;
            }
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        z: ValueId,
        t: S,
        cond: ValueId,
    ) -> Result<ValueId> {
        if t < S::zero() || t > S::one() {
            return Err(Error::InvalidArgument(format!(
                "velocity time {t} outside [0, 1]"
            )));
        }
        let (gw, gh) = self.grid;
        let c = self.cfg.channels;
        let n = gw * gh;
        if tape.shape(z) != [n, c] || tape.shape(cond) != [n, c] {
            return Err(Error::ShapeMismatch {
                op: "velocity",
                detail: format!(
                    "z {:?} / cond {:?} vs tokens [{n}, {c}]",
                    tape.shape(z),
                    tape.shape(cond)
                ),
            });
        }
        let ns = self.namespace.clone();
        let h = self.cfg.hidden;
        let emb = time_embedding(t, self.cfg.time_embed);
        let emb1 = Tensor::from_vec(vec![1, self.cfg.time_embed], emb.into_data())?;

        match self.cfg.variant {
            VelocityVariant::SimpleCnn => {
                let pad = if self.cfg.cyclic_pad { Pad::Cyclic } else { Pad::Same };
                let zg = tape.reshape(z, &[gw, gh, c])?;
                let cg = tape.reshape(cond, &[gw, gh, c])?;
                let x = tape.concat(&[zg, cg], 2)?;
                let mut f = conv_bias(tape, store, x, &format!("{ns}.in.w"), &format!("{ns}.in.b"), pad)?;
                let te = tape.constant(emb1);
                let tw = tape.param(store, &format!("{ns}.t.w"))?;
                let tv = tape.matmul(te, tw)?;
                let tvec = tape.reshape(tv, &[h])?;
                let tb = tape.broadcast(tvec, &[gw, gh, h])?;
                f = tape.add(f, tb)?;
                f = tape.gelu(f);
                let mut m = conv_bias(tape, store, f, &format!("{ns}.mid.w"), &format!("{ns}.mid.b"), pad)?;
                m = tape.gelu(m);
                let out = conv_bias(tape, store, m, &format!("{ns}.out.w"), &format!("{ns}.out.b"), pad)?;
                tape.reshape(out, &[n, c])
            }
            VelocityVariant::Mlp => {
                let x = tape.concat(&[z, cond], 1)?;
                let mut f = matmul_bias(tape, store, x, &format!("{ns}.l1.w"), &format!("{ns}.l1.b"))?;
                let te = tape.constant(emb1);
                let tw = tape.param(store, &format!("{ns}.t.w"))?;
                let tv = tape.matmul(te, tw)?;
                let tvec = tape.reshape(tv, &[h])?;
                let tb = tape.broadcast(tvec, &[n, h])?;
                f = tape.add(f, tb)?;
                f = tape.gelu(f);
                let mut m = matmul_bias(tape, store, f, &format!("{ns}.l2.w"), &format!("{ns}.l2.b"))?;
                m = tape.gelu(m);
                matmul_bias(tape, store, m, &format!("{ns}.l3.w"), &format!("{ns}.l3.b"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::gradcheck::grad_check;
    use crate::ndtensor::rng::{rand_normal, Rng};

    fn encoder_input(seed: u64, w: usize, h: usize, c: usize) -> Tensor<f64> {
        rand_normal::<f64>(&mut Rng::new(seed), &[w, h, c]).scale(0.3)
    }

    #[test]
    fn encoder_output_shape() {
        // W=H=32, r=4, c=16 -> [64, 16]
        let cfg = EncoderConfig::default();
        let le = LatentEncoder::new(cfg, 16, "le");
        let mut ps = ParamStore::<f64>::new(5);
        le.register_params(&mut ps).unwrap();
        let mut tape = Tape::new();
        let inp = tape.constant(encoder_input(1, 32, 32, 16));
        let (tokens, grid) = le.forward(&mut tape, &ps, inp).unwrap();
        assert_eq!(tape.shape(tokens), &[64, 16]);
        assert_eq!(grid, (8, 8));
    }

    #[test]
    fn encoder_indivisible_extents_rejected() {
        let le = LatentEncoder::new(EncoderConfig::default(), 4, "le");
        let mut ps = ParamStore::<f64>::new(5);
        le.register_params(&mut ps).unwrap();
        let mut tape = Tape::new();
        let inp = tape.constant(encoder_input(1, 30, 32, 4));
        assert!(le.forward(&mut tape, &ps, inp).is_err());
    }

    #[test]
    fn encode_distinguishes_inputs_after_init() {
        let cfg = EncoderConfig {
            unshuffle: 2,
            width: 8,
            channels: 8,
            ..EncoderConfig::default()
        };
        let le = LatentEncoder::new(cfg, 6, "le");
        let mut ps = ParamStore::<f64>::new(11);
        le.register_params(&mut ps).unwrap();
        let y = encoder_input(2, 8, 8, 3);
        let x1 = encoder_input(3, 8, 8, 3);
        let x2 = encoder_input(4, 8, 8, 3);
        let mut run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let yid = tape.constant(y.clone());
            let xid = tape.constant(x.clone());
            let (tok, _) = encode(&le, &mut tape, &ps, yid, xid).unwrap();
            tape.value(tok).clone()
        };
        let t1 = run(&x1);
        let t1b = run(&x1);
        let t2 = run(&x2);
        assert_eq!(t1.data(), t1b.data(), "deterministic");
        assert_ne!(t1.data(), t2.data(), "non-degenerate");
    }

    #[test]
    fn encoder_translation_equivariance_cyclic() {
        // translating the input by multiples of r permutes tokens accordingly
        let cfg = EncoderConfig {
            unshuffle: 2,
            width: 8,
            channels: 4,
            mobile_blocks: 1,
            mixer_depth: 1,
            cyclic_pad: true,
        };
        let le = LatentEncoder::new(cfg.clone(), 3, "le");
        let mut ps = ParamStore::<f64>::new(21);
        le.register_params(&mut ps).unwrap();
        let input = encoder_input(9, 8, 8, 3);
        let run = |inp: &Tensor<f64>| {
            let mut tape = Tape::new();
            let id = tape.constant(inp.clone());
            let (tok, grid) = le.forward(&mut tape, &ps, id).unwrap();
            (tape.value(tok).clone(), grid)
        };
        let (base, (gw, gh)) = run(&input);
        for (si, sj) in [(1usize, 0usize), (0, 1), (2, 1)] {
            // cyclic shift by (si*r, sj*r)
            let (r, w, h, c) = (cfg.unshuffle, 8usize, 8usize, 3usize);
            let mut shifted = Tensor::<f64>::zeros(&[w, h, c]);
            for i in 0..w {
                for j in 0..h {
                    for ch in 0..c {
                        let src = input.at(&[(i + si * r) % w, (j + sj * r) % h, ch]);
                        shifted.set(&[i, j, ch], src);
                    }
                }
            }
            let (tok_s, _) = run(&shifted);
            // token (i, j) of shifted equals token ((i+si)%gw, (j+sj)%gh) of base
            for i in 0..gw {
                for j in 0..gh {
                    for ch in 0..cfg.channels {
                        let a = tok_s.at(&[i * gh + j, ch]);
                        let b = base.at(&[((i + si) % gw) * gh + ((j + sj) % gh), ch]);
                        assert!(
                            (a - b).abs() < 1e-9,
                            "shift ({si},{sj}) token ({i},{j},{ch}): {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn denoiser_is_identity_at_init() {
        let cfg = DenoiserConfig {
            base_width: 8,
            prior_channels: 8,
            cyclic_pad: true,
        };
        let den = Denoiser::new(cfg, 3, "den.0", true);
        let mut ps = ParamStore::<f64>::new(7);
        den.register_params(&mut ps).unwrap();
        let x = encoder_input(5, 8, 8, 3);
        let prior = rand_normal::<f64>(&mut Rng::new(6), &[4, 8]);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let pid = tape.constant(prior);
        let out = den.forward(&mut tape, &ps, xid, Some((pid, (2, 2)))).unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }

    #[test]
    fn denoiser_prior_gradient_flows() {
        // randomize the final conv so delta depends on features
        let cfg = DenoiserConfig {
            base_width: 4,
            prior_channels: 4,
            cyclic_pad: true,
        };
        let den = Denoiser::new(cfg, 2, "den.0", true);
        let mut ps = ParamStore::<f64>::new(8);
        den.register_params(&mut ps).unwrap();
        let rnd = rand_normal::<f64>(&mut Rng::new(9), &[3, 3, 4, 2]).scale(0.2);
        *ps.value_mut("den.0.out.w").unwrap() = rnd;
        // wake the modulation heads so the prior participates
        for li in 0..3 {
            let cl = 4 << li.min(2);
            let w = rand_normal::<f64>(&mut Rng::new(50 + li as u64), &[1, 1, 4, cl]).scale(0.3);
            *ps.value_mut(&format!("den.0.l{li}.ms.w")).unwrap() = w.clone();
            *ps.value_mut(&format!("den.0.l{li}.mb.w")).unwrap() = w.scale(0.5);
        }
        ps.insert("prior", rand_normal::<f64>(&mut Rng::new(10), &[4, 4]).scale(0.5), true)
            .unwrap();

        let x = encoder_input(11, 8, 8, 2);
        let err = grad_check(
            |tape, ps| {
                let xid = tape.constant(x.clone());
                let pid = tape.param(ps, "prior")?;
                let out = den.forward(tape, ps, xid, Some((pid, (2, 2))))?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum_all(sq))
            },
            &mut ps,
            1e-4,
            8,
            13,
        )
        .unwrap();
        assert!(err <= 1e-4, "err {err}");
        // nonzero gradient actually reached the prior
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let pid = tape.param(&ps, "prior").unwrap();
        let out = den.forward(&mut tape, &ps, xid, Some((pid, (2, 2)))).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum_all(sq);
        ps.zero_grads();
        tape.backward(loss, &mut ps).unwrap();
        assert!(ps.grad("prior").unwrap().max_abs() > 0.0);
    }

    #[test]
    fn velocity_shapes_and_time_domain() {
        for variant in [VelocityVariant::SimpleCnn, VelocityVariant::Mlp] {
            let cfg = VelocityConfig {
                variant,
                channels: 8,
                hidden: 16,
                ..VelocityConfig::default()
            };
            let vn = VelocityNet::new(cfg, (4, 4), "vel");
            let mut ps = ParamStore::<f64>::new(3);
            vn.register_params(&mut ps).unwrap();
            let z = rand_normal::<f64>(&mut Rng::new(1), &[16, 8]);
            let cond = rand_normal::<f64>(&mut Rng::new(2), &[16, 8]);
            let mut tape = Tape::new();
            let zid = tape.constant(z.clone());
            let cid = tape.constant(cond.clone());
            let out = vn.forward(&mut tape, &ps, zid, 0.5, cid).unwrap();
            assert_eq!(tape.shape(out), &[16, 8]);
            // zero-init final layer -> zero velocity
            assert!(tape.value(out).max_abs() == 0.0);
            assert!(vn.forward(&mut tape, &ps, zid, 1.5, cid).is_err());
            assert!(vn.forward(&mut tape, &ps, zid, -0.1, cid).is_err());
        }
    }
}
