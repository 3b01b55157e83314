//! Constant-velocity flow matching over the latent-prior space: linear
//! trajectories, the velocity regression loss, the mean-velocity constraint,
//! and differentiable Euler sampling from the noise end (t=1) down to the
//! data end (t=0).

use crate::error::{Error, Result};
use crate::ndtensor::params::ParamStore;
use crate::ndtensor::rng::{rand_normal, Rng};
use crate::ndtensor::scalar::Scalar;
use crate::ndtensor::tape::{Tape, ValueId};
use crate::ndtensor::tensor::Tensor;
use crate::nnblocks::VelocityNet;

/// Anything that predicts a velocity field over token tensors. The network
/// variants implement this; analytic/toy fields in tests implement it too.
pub trait VelocityModel<S: Scalar> {
    fn velocity(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        z: ValueId,
        t: S,
        cond: ValueId,
    ) -> Result<ValueId>;
}

impl<S: Scalar> VelocityModel<S> for VelocityNet {
    fn velocity(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        z: ValueId,
        t: S,
        cond: ValueId,
    ) -> Result<ValueId> {
        self.forward(tape, store, z, t, cond)
    }
}

/// One point on the linear path between a data sample (t=0) and noise (t=1).
#[derive(Debug, Clone)]
pub struct FlowPath<S> {
    pub z0: Tensor<S>,
    pub z1: Tensor<S>,
    pub t: S,
    /// `(1-t) z0 + t z1`
    pub z_t: Tensor<S>,
    /// Constant target velocity `z1 - z0`.
    pub v_star: Tensor<S>,
}

pub fn make_path<S: Scalar>(z0: &Tensor<S>, z1: &Tensor<S>, t: S) -> Result<FlowPath<S>> {
    if z0.shape() != z1.shape() {
        return Err(Error::ShapeMismatch {
            op: "make_path",
            detail: format!("{:?} vs {:?}", z0.shape(), z1.shape()),
        });
    }
    if t < S::zero() || t > S::one() {
        return Err(Error::InvalidArgument(format!("path time {t} outside [0, 1]")));
    }
    let one_minus = S::one() - t;
    let z_t = z0.zip(z1, |a, b| one_minus * a + t * b)?;
    let v_star = z1.zip(z0, |b, a| b - a)?;
    Ok(FlowPath {
        z0: z0.clone(),
        z1: z1.clone(),
        t,
        z_t,
        v_star,
    })
}

/// One training tuple living on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FlowItem<S> {
    pub z0: ValueId,
    pub z1: ValueId,
    /// Drawn uniform on [0,1] by the caller.
    pub t: S,
    pub cond: ValueId,
}

fn path_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    item: &FlowItem<S>,
) -> Result<(ValueId, ValueId)> {
    // z_t = (1-t) z0 + t z1 ; v* = z1 - z0
    let a = tape.scale(item.z0, S::one() - item.t);
    let b = tape.scale(item.z1, item.t);
    let z_t = tape.add(a, b)?;
    let v_star = tape.sub(item.z1, item.z0)?;
    Ok((z_t, v_star))
}

/// Mean over the batch of the squared L2 distance between the target and the
/// predicted velocity.
pub fn fm_regression_loss<S: Scalar, V: VelocityModel<S>>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    vn: &V,
    batch: &[FlowItem<S>],
) -> Result<ValueId> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("fm_regression_loss on empty batch".into()));
    }
    let mut acc: Option<ValueId> = None;
    for item in batch {
        let (z_t, v_star) = path_on_tape(tape, item)?;
        let pred = vn.velocity(tape, store, z_t, item.t, item.cond)?;
        let err = tape.sub(pred, v_star)?;
        let sq = tape.mul(err, err)?;
        let l = tape.sum_all(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(tape.scale(acc.unwrap(), S::one() / S::from_usize(batch.len())))
}

/// Squared L2 norm of the batch-mean error: expectations over samples and
/// their drawn times are estimated jointly by the batch mean per coordinate.
pub fn mean_velocity_loss<S: Scalar, V: VelocityModel<S>>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    vn: &V,
    batch: &[FlowItem<S>],
) -> Result<ValueId> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mean_velocity_loss needs batch >= 2, got {}",
            batch.len()
        )));
    }
    let mut acc: Option<ValueId> = None;
    for item in batch {
        let (z_t, v_star) = path_on_tape(tape, item)?;
        let pred = vn.velocity(tape, store, z_t, item.t, item.cond)?;
        let err = tape.sub(pred, v_star)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, err)?,
            None => err,
        });
    }
    let mean = tape.scale(acc.unwrap(), S::one() / S::from_usize(batch.len()));
    let sq = tape.mul(mean, mean)?;
    Ok(tape.sum_all(sq))
}

/// `mean|z0_hat - z_le| + lambda_mean * L_mean`. The sample term uses the
/// per-coordinate mean absolute error so magnitudes stay scale-free.
pub fn combined_fm_loss<S: Scalar, V: VelocityModel<S>>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    z0_hat: ValueId,
    z_le: ValueId,
    vn: &V,
    batch: &[FlowItem<S>],
    lambda_mean: S,
) -> Result<ValueId> {
    if lambda_mean < S::zero() {
        return Err(Error::InvalidArgument(format!(
            "lambda_mean must be >= 0, got {lambda_mean}"
        )));
    }
    let diff = tape.sub(z0_hat, z_le)?;
    let ad = tape.abs(diff);
    let l1 = tape.mean_all(ad);
    if lambda_mean == S::zero() {
        return Ok(l1);
    }
    let lm = mean_velocity_loss(tape, store, vn, batch)?;
    let weighted = tape.scale(lm, lambda_mean);
    tape.add(l1, weighted)
}

/// Euler integration config.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl SamplerConfig {
    /// Training-time sampling keeps the differentiable unroll short.
    pub fn training() -> Self {
        SamplerConfig { steps: 4 }
    }

    pub fn inference() -> Self {
        SamplerConfig { steps: 8 }
    }
}

/// Integrate the learned field from the noise end to the data end:
/// `z <- z - (1/S) v(z, s/S, cond)` for `s = S..1`, starting from
/// `z ~ N(0, I)` drawn from `rng`. Differentiable through every step.
pub fn sample<S: Scalar, V: VelocityModel<S>>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    vn: &V,
    cond: ValueId,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<ValueId> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("sampler needs steps >= 1".into()));
    }
    let shape = tape.shape(cond).to_vec();
    let z1 = rand_normal::<S>(rng, &shape);
    let start = tape.constant(z1);
    sample_from(tape, store, vn, start, cond, cfg)
}

/// Euler integration from a given noise-end state (shared by tests and the
/// training loop when the starting noise must be observable).
pub fn sample_from<S: Scalar, V: VelocityModel<S>>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    vn: &V,
    z1: ValueId,
    cond: ValueId,
    cfg: &SamplerConfig,
) -> Result<ValueId> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("sampler needs steps >= 1".into()));
    }
    let steps = cfg.steps;
    let dt = S::one() / S::from_usize(steps);
    let mut z = z1;
    for s in (1..=steps).rev() {
        let t_s = S::from_usize(s) / S::from_usize(steps);
        let v = vn.velocity(tape, store, z, t_s, cond)?;
        let step = tape.scale(v, dt);
        z = tape.sub(z, step)?;
    }
    Ok(z)
}
