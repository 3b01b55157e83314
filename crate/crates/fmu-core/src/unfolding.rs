//! N-stage GAP deep unfolding: alternate a Euclidean projection onto the
//! measurement-consistent set with a prior-guided denoiser, plus a learnable
//! per-stage step size that rescales the projection residual.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flowmatch::{self, SamplerConfig, VelocityModel};
use crate::ndtensor::params::ParamStore;
use crate::ndtensor::rng::Rng;
use crate::ndtensor::scalar::Scalar;
use crate::ndtensor::tape::{Tape, ValueId};
use crate::nnblocks::{encode_condition, Denoiser, DenoiserConfig, LatentEncoder, LatentPrior};
use crate::sensing::{HsiCube, Measurement, SensingSystem};

/// Where the denoiser's guiding prior comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorSource {
    /// Phase 1: latent encoder over (y_norm, x).
    Encoder,
    /// Phase 2 / inference: flow-matching sample conditioned on y_norm.
    Flow,
    /// Prior-free baseline.
    None,
}

#[derive(Debug, Clone)]
pub struct UnfoldingConfig {
    pub stages: usize,
    pub prior: PriorSource,
    pub denoiser: DenoiserConfig,
}

impl UnfoldingConfig {
    pub fn desk_default() -> Self {
        UnfoldingConfig {
            stages: 3,
            prior: PriorSource::Flow,
            denoiser: DenoiserConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::InvalidArgument("unfolding needs stages >= 1".into()));
        }
        Ok(())
    }

    /// Per-stage denoisers; weights are not shared across stages.
    pub fn denoisers(&self, bands: usize) -> Vec<Denoiser> {
        (0..self.stages)
            .map(|k| {
                Denoiser::new(
                    self.denoiser.clone(),
                    bands,
                    &format!("den.{k}"),
                    self.prior != PriorSource::None,
                )
            })
            .collect()
    }

    pub fn rho_name(k: usize) -> String {
        format!("rho.{k}")
    }

    /// Register per-stage denoiser weights and step sizes (rho init 1).
    pub fn register_params<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        bands: usize,
    ) -> Result<()> {
        for den in self.denoisers(bands) {
            den.register_params(store)?;
        }
        for k in 0..self.stages {
            store.init_const(&Self::rho_name(k), &[], S::one())?;
        }
        Ok(())
    }
}

/// One GAP projection with gradient correction:
/// `x_{k+1} = theta_k + rho_k * pinv(y - Phi theta_k)`.
/// `rho_k = 1` recovers the exact Euclidean projection.
pub fn gap_project<S: Scalar>(
    tape: &mut Tape<S>,
    sys: &Arc<SensingSystem<S>>,
    theta: ValueId,
    y: ValueId,
    rho: ValueId,
) -> Result<ValueId> {
    let ftheta = tape.sensing_forward(sys, theta)?;
    let resid = tape.sub(y, ftheta)?;
    let corr = tape.sensing_pinv(sys, resid)?;
    let corr_shape = tape.shape(corr).to_vec();
    let rho_b = tape.broadcast(rho, &corr_shape)?;
    let scaled = tape.mul(corr, rho_b)?;
    tape.add(theta, scaled)
}

/// Full unfolding pass on the tape: `theta_0 = pinv(y)`, then N alternations
/// of projection and denoising, with a final clamp to [0, 1]. One prior
/// tensor is shared by every stage.
pub fn fmu_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    cfg: &UnfoldingConfig,
    sys: &Arc<SensingSystem<S>>,
    y: ValueId,
    prior: Option<(ValueId, (usize, usize))>,
) -> Result<ValueId> {
    cfg.validate()?;
    if cfg.prior != PriorSource::None && prior.is_none() {
        return Err(Error::InvalidArgument(
            "unfolding configured with a prior but none was supplied".into(),
        ));
    }
    let denoisers = cfg.denoisers(sys.bands());
    let mut theta = tape.sensing_pinv(sys, y)?;
    for (k, den) in denoisers.iter().enumerate() {
        let rho = tape.param(store, &UnfoldingConfig::rho_name(k))?;
        let x = gap_project(tape, sys, theta, y, rho)?;
        theta = den.forward(tape, store, x, prior)?;
    }
    Ok(tape.clamp_unit(theta))
}

/// Inference: normalize the measurement, sample the flow prior conditioned on
/// it, and run the unfolding pass. Deterministic given (params, y, rng seed).
#[allow(clippy::too_many_arguments)]
pub fn reconstruct<S: Scalar, V: VelocityModel<S>>(
    store: &ParamStore<S>,
    cfg: &UnfoldingConfig,
    sys: &Arc<SensingSystem<S>>,
    y: &Measurement<S>,
    vn: &V,
    cond_encoder: &LatentEncoder,
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<HsiCube<S>> {
    let mut tape = Tape::new();
    let yid = tape.constant(y.tensor().clone());
    let prior = match cfg.prior {
        PriorSource::None => None,
        PriorSource::Flow | PriorSource::Encoder => {
            let y_norm = tape.sensing_pinv(sys, yid)?;
            let (cond, grid) = encode_condition(cond_encoder, &mut tape, store, y_norm)?;
            let z0_hat = flowmatch::sample(&mut tape, store, vn, cond, sampler, rng)?;
            Some((z0_hat, grid))
        }
    };
    let out = fmu_forward(&mut tape, store, cfg, sys, yid, prior)?;
    HsiCube::new(tape.value(out).clone())
}

/// Prior sampled outside the unfolding graph (for reuse across measurements).
pub fn sample_prior<S: Scalar, V: VelocityModel<S>>(
    store: &ParamStore<S>,
    sys: &Arc<SensingSystem<S>>,
    y: &Measurement<S>,
    vn: &V,
    cond_encoder: &LatentEncoder,
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<LatentPrior<S>> {
    let mut tape = Tape::new();
    let yid = tape.constant(y.tensor().clone());
    let y_norm = tape.sensing_pinv(sys, yid)?;
    let (cond, grid) = encode_condition(cond_encoder, &mut tape, store, y_norm)?;
    let z0_hat = flowmatch::sample(&mut tape, store, vn, cond, sampler, rng)?;
    Ok(LatentPrior {
        tokens: tape.value(z0_hat).clone(),
        grid,
    })
}
