//! 64-bit gradient verification suite: every tape op kind, each network
//! block, the differentiable sampler, and an end-to-end unfolding loss.

use std::sync::Arc;

use crate::error::Result;
use crate::flowmatch::{sample_from, SamplerConfig};
use crate::ndtensor::gradcheck::grad_check;
use crate::ndtensor::params::ParamStore;
use crate::ndtensor::rng::{rand_normal, Rng};
use crate::ndtensor::tape::{Tape, ValueId};
use crate::ndtensor::tensor::{Pad, Tensor};
use crate::nnblocks::{
    Denoiser, DenoiserConfig, EncoderConfig, LatentEncoder, VelocityConfig, VelocityNet,
    VelocityVariant,
};
use crate::sensing::testgen::random_system;
use crate::unfolding::{fmu_forward, PriorSource, UnfoldingConfig};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

/// Shift values away from zero so kinked ops (relu/abs) see a stable branch
/// under the finite-difference probe.
fn away_from_zero(t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

fn sq_sum_loss(tape: &mut Tape<f64>, out: ValueId) -> Result<ValueId> {
    let sq = tape.mul(out, out)?;
    Ok(tape.sum_all(sq))
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<ValueId>>;

fn check(
    results: &mut Vec<CheckResult>,
    name: &str,
    mut params: ParamStore<f64>,
    max_coords: usize,
    f: CheckFn,
) -> Result<()> {
    let err = grad_check(|t, p| f(t, p), &mut params, 1e-4, max_coords, 0xABCD)?;
    results.push(CheckResult {
        name: name.to_string(),
        max_rel_err: err,
    });
    Ok(())
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rand_normal::<f64>(rng, shape)
}

/// Run the whole suite; `max_coords` bounds sampled coordinates per parameter.
pub fn gradient_suite(max_coords: usize) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(0x5EED);
    let mut results = Vec::new();

    // --- elementwise and structural ops ---
    {
        let mut ps = ParamStore::new(1);
        ps.insert("a", randn(&mut rng, &[3, 4]), true)?;
        ps.insert("b", randn(&mut rng, &[3, 4]), true)?;
        check(&mut results, "op.add", ps.clone(), max_coords, Box::new(|t, p| {
            let a = t.param(p, "a")?;
            let b = t.param(p, "b")?;
            let o = t.add(a, b)?;
            sq_sum_loss(t, o)
        }))?;
        check(&mut results, "op.sub", ps.clone(), max_coords, Box::new(|t, p| {
            let a = t.param(p, "a")?;
            let b = t.param(p, "b")?;
            let o = t.sub(a, b)?;
            sq_sum_loss(t, o)
        }))?;
        check(&mut results, "op.mul", ps, max_coords, Box::new(|t, p| {
            let a = t.param(p, "a")?;
            let b = t.param(p, "b")?;
            let o = t.mul(a, b)?;
            sq_sum_loss(t, o)
        }))?;
    }
    {
        let mut ps = ParamStore::new(2);
        ps.insert("a", randn(&mut rng, &[4, 3]), true)?;
        ps.insert("b", randn(&mut rng, &[3, 5]), true)?;
        check(&mut results, "op.matmul", ps, max_coords, Box::new(|t, p| {
            let a = t.param(p, "a")?;
            let b = t.param(p, "b")?;
            let o = t.matmul(a, b)?;
            sq_sum_loss(t, o)
        }))?;
    }
    for (pad, tag) in [
        (Pad::Valid, "valid"),
        (Pad::Same, "same"),
        (Pad::Cyclic, "cyclic"),
    ] {
        let mut ps = ParamStore::new(3);
        ps.insert("x", randn(&mut rng, &[5, 6, 2]), true)?;
        ps.insert("k", randn(&mut rng, &[3, 3, 2, 3]).scale(0.5), true)?;
        check(
            &mut results,
            &format!("op.conv2d.{tag}"),
            ps,
            max_coords,
            Box::new(move |t, p| {
                let x = t.param(p, "x")?;
                let k = t.param(p, "k")?;
                let o = t.conv2d(x, k, pad)?;
                sq_sum_loss(t, o)
            }),
        )?;
    }
    {
        let mut ps = ParamStore::new(4);
        ps.insert("x", randn(&mut rng, &[5, 5, 3]), true)?;
        ps.insert("k", randn(&mut rng, &[3, 3, 3]).scale(0.5), true)?;
        check(&mut results, "op.depthwise_conv2d", ps, max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let k = t.param(p, "k")?;
            let o = t.depthwise_conv2d(x, k, Pad::Cyclic)?;
            sq_sum_loss(t, o)
        }))?;
    }
    {
        let mut ps = ParamStore::new(5);
        ps.insert("x", away_from_zero(randn(&mut rng, &[4, 4]), 0.2), true)?;
        check(&mut results, "op.relu", ps.clone(), max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let o = t.relu(x);
            sq_sum_loss(t, o)
        }))?;
        check(&mut results, "op.abs", ps.clone(), max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let o = t.abs(x);
            sq_sum_loss(t, o)
        }))?;
        check(&mut results, "op.gelu", ps.clone(), max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let o = t.gelu(x);
            sq_sum_loss(t, o)
        }))?;
        check(&mut results, "op.sigmoid", ps.clone(), max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let o = t.sigmoid(x);
            sq_sum_loss(t, o)
        }))?;
        check(&mut results, "op.scale", ps, max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let o = t.scale(x, -1.7);
            sq_sum_loss(t, o)
        }))?;
    }
    {
        // clamp inputs sit strictly inside (0, 1), away from the kinks
        let mut ps = ParamStore::new(6);
        let vals = randn(&mut rng, &[4, 4]).map(|v| 0.5 + 0.35 * v.tanh());
        ps.insert("x", vals, true)?;
        check(&mut results, "op.clamp_unit", ps, max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let o = t.clamp_unit(x);
            sq_sum_loss(t, o)
        }))?;
    }
    {
        let mut ps = ParamStore::new(7);
        ps.insert("x", randn(&mut rng, &[3, 6]), true)?;
        ps.insert("g", randn(&mut rng, &[6]).map(|v| 1.0 + 0.2 * v), true)?;
        ps.insert("b", randn(&mut rng, &[6]).scale(0.2), true)?;
        check(&mut results, "op.layer_norm", ps, max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let g = t.param(p, "g")?;
            let b = t.param(p, "b")?;
            let o = t.layer_norm(x, g, b, 1e-5)?;
            sq_sum_loss(t, o)
        }))?;
    }
    {
        let mut ps = ParamStore::new(8);
        ps.insert("x", randn(&mut rng, &[3, 4]), true)?;
        check(&mut results, "op.sum", ps.clone(), max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let s = t.sum_all(x);
            sq_sum_loss(t, s)
        }))?;
        check(&mut results, "op.mean", ps.clone(), max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let m = t.mean_all(x);
            sq_sum_loss(t, m)
        }))?;
        check(&mut results, "op.reshape", ps.clone(), max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let r = t.reshape(x, &[2, 6])?;
            sq_sum_loss(t, r)
        }))?;
        check(&mut results, "op.transpose2d", ps.clone(), max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let r = t.transpose2d(x)?;
            sq_sum_loss(t, r)
        }))?;
        check(&mut results, "op.broadcast", ps, max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let b = t.broadcast(x, &[5, 3, 4])?;
            sq_sum_loss(t, b)
        }))?;
    }
    {
        let mut ps = ParamStore::new(9);
        ps.insert("a", randn(&mut rng, &[2, 3, 2]), true)?;
        ps.insert("b", randn(&mut rng, &[2, 2, 2]), true)?;
        check(&mut results, "op.concat", ps, max_coords, Box::new(|t, p| {
            let a = t.param(p, "a")?;
            let b = t.param(p, "b")?;
            let c = t.concat(&[a, b], 1)?;
            sq_sum_loss(t, c)
        }))?;
    }
    {
        let mut ps = ParamStore::new(10);
        ps.insert("x", randn(&mut rng, &[4, 4, 2]), true)?;
        check(&mut results, "op.pixel_unshuffle", ps.clone(), max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let u = t.pixel_unshuffle(x, 2)?;
            sq_sum_loss(t, u)
        }))?;
        check(&mut results, "op.repeat_upsample", ps, max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let u = t.repeat_upsample(x, 3)?;
            sq_sum_loss(t, u)
        }))?;
        let mut ps = ParamStore::new(11);
        ps.insert("x", randn(&mut rng, &[2, 2, 8]), true)?;
        check(&mut results, "op.pixel_shuffle", ps, max_coords, Box::new(|t, p| {
            let x = t.param(p, "x")?;
            let u = t.pixel_shuffle(x, 2)?;
            sq_sum_loss(t, u)
        }))?;
    }
    // --- sensing operators on the tape ---
    for (cassi, tag) in [(false, "filter"), (true, "cassi")] {
        let sys = Arc::new(random_system::<f64>(&mut rng, 4, 5, 3, cassi, 1, 0.1, 1.0));
        let hm = sys.meas_height();
        let mut ps = ParamStore::new(12);
        ps.insert("x", randn(&mut rng, &[4, 5, 3]), true)?;
        ps.insert("y", randn(&mut rng, &[4, hm]), true)?;
        let sys_f = Arc::clone(&sys);
        check(
            &mut results,
            &format!("op.sensing_forward.{tag}"),
            ps.clone(),
            max_coords,
            Box::new(move |t, p| {
                let x = t.param(p, "x")?;
                let o = t.sensing_forward(&sys_f, x)?;
                sq_sum_loss(t, o)
            }),
        )?;
        let sys_p = Arc::clone(&sys);
        check(
            &mut results,
            &format!("op.sensing_pinv.{tag}"),
            ps,
            max_coords,
            Box::new(move |t, p| {
                let y = t.param(p, "y")?;
                let o = t.sensing_pinv(&sys_p, y)?;
                sq_sum_loss(t, o)
            }),
        )?;
    }

    // --- network blocks ---
    let enc_cfg = EncoderConfig {
        unshuffle: 4,
        width: 6,
        mobile_blocks: 1,
        mixer_depth: 1,
        channels: 4,
        cyclic_pad: true,
    };
    {
        let le = LatentEncoder::new(enc_cfg.clone(), 3, "le");
        let mut ps = ParamStore::new(13);
        le.register_params(&mut ps)?;
        ps.insert("inp", randn(&mut rng, &[8, 8, 3]).scale(0.4), true)?;
        check(&mut results, "block.latent_encoder", ps, max_coords, Box::new(move |t, p| {
            let inp = t.param(p, "inp")?;
            let (tok, _) = le.forward(t, p, inp)?;
            sq_sum_loss(t, tok)
        }))?;
    }
    {
        let den_cfg = DenoiserConfig {
            base_width: 4,
            prior_channels: 4,
            cyclic_pad: true,
        };
        let den = Denoiser::new(den_cfg, 3, "den.0", true);
        let mut ps = ParamStore::new(14);
        den.register_params(&mut ps)?;
        *ps.value_mut("den.0.out.w")? = randn(&mut rng, &[3, 3, 4, 3]).scale(0.1);
        for li in 0..3usize {
            let cl = 4 << li;
            *ps.value_mut(&format!("den.0.l{li}.ms.w"))? =
                randn(&mut rng, &[1, 1, 4, cl]).scale(0.3);
            *ps.value_mut(&format!("den.0.l{li}.mb.w"))? =
                randn(&mut rng, &[1, 1, 4, cl]).scale(0.3);
        }
        ps.insert("x", randn(&mut rng, &[8, 8, 3]).scale(0.4), true)?;
        ps.insert("prior", randn(&mut rng, &[4, 4]).scale(0.5), true)?;
        check(&mut results, "block.denoiser", ps, max_coords, Box::new(move |t, p| {
            let x = t.param(p, "x")?;
            let prior = t.param(p, "prior")?;
            let o = den.forward(t, p, x, Some((prior, (2, 2))))?;
            sq_sum_loss(t, o)
        }))?;
    }
    for (variant, tag) in [
        (VelocityVariant::SimpleCnn, "simplecnn"),
        (VelocityVariant::Mlp, "mlp"),
    ] {
        let vcfg = VelocityConfig {
            variant,
            channels: 4,
            hidden: 8,
            time_embed: 4,
            cyclic_pad: true,
        };
        let vn = VelocityNet::new(vcfg, (2, 2), "vel");
        let mut ps = ParamStore::new(15);
        vn.register_params(&mut ps)?;
        // give the zero-init output layer signal
        let out_name = match variant {
            VelocityVariant::SimpleCnn => "vel.out.w",
            VelocityVariant::Mlp => "vel.l3.w",
        };
        let shape = ps.value(out_name)?.shape().to_vec();
        *ps.value_mut(out_name)? = randn(&mut rng, &shape).scale(0.3);
        ps.insert("z", randn(&mut rng, &[4, 4]), true)?;
        ps.insert("cond", randn(&mut rng, &[4, 4]), true)?;
        check(
            &mut results,
            &format!("block.velocity.{tag}"),
            ps,
            max_coords,
            Box::new(move |t, p| {
                let z = t.param(p, "z")?;
                let c = t.param(p, "cond")?;
                let o = vn.forward(t, p, z, 0.37, c)?;
                sq_sum_loss(t, o)
            }),
        )?;
    }
    {
        // differentiable Euler sampler, S = 4
        let vcfg = VelocityConfig {
            variant: VelocityVariant::SimpleCnn,
            channels: 4,
            hidden: 8,
            time_embed: 4,
            cyclic_pad: true,
        };
        let vn = VelocityNet::new(vcfg, (2, 2), "vel");
        let mut ps = ParamStore::new(16);
        vn.register_params(&mut ps)?;
        *ps.value_mut("vel.out.w")? = randn(&mut rng, &[3, 3, 8, 4]).scale(0.3);
        ps.insert("cond", randn(&mut rng, &[4, 4]), true)?;
        let z1 = randn(&mut rng, &[4, 4]);
        check(&mut results, "block.sampler.s4", ps, max_coords, Box::new(move |t, p| {
            let cond = t.param(p, "cond")?;
            let z1id = t.constant(z1.clone());
            let out = sample_from(t, p, &vn, z1id, cond, &SamplerConfig { steps: 4 })?;
            sq_sum_loss(t, out)
        }))?;
    }
    {
        // end-to-end unfolding loss on an 8x8x3 instance
        let sys = Arc::new(random_system::<f64>(&mut rng, 8, 8, 3, false, 0, 0.6, 1.0));
        let cfg = UnfoldingConfig {
            stages: 2,
            prior: PriorSource::Flow,
            denoiser: DenoiserConfig {
                base_width: 4,
                prior_channels: 4,
                cyclic_pad: true,
            },
        };
        let mut ps = ParamStore::new(17);
        cfg.register_params(&mut ps, 3)?;
        for k in 0..2 {
            *ps.value_mut(&format!("den.{k}.out.w"))? =
                randn(&mut rng, &[3, 3, 4, 3]).scale(0.003);
            for li in 0..3usize {
                let cl = 4 << li;
                *ps.value_mut(&format!("den.{k}.l{li}.ms.w"))? =
                    randn(&mut rng, &[1, 1, 4, cl]).scale(0.1);
                *ps.value_mut(&format!("den.{k}.l{li}.mb.w"))? =
                    randn(&mut rng, &[1, 1, 4, cl]).scale(0.1);
            }
        }
        ps.insert("prior", randn(&mut rng, &[4, 4]).scale(0.5), true)?;
        let target = randn(&mut rng, &[8, 8, 3]).map(|v| 0.5 + 0.15 * v.tanh());
        let y = {
            let tgt = crate::sensing::HsiCube::new(target.clone())?;
            sys.forward(&tgt)?.into_tensor()
        };
        // keep the clamp away from its kinks for the finite-difference probe
        {
            let mut tape = Tape::new();
            let yid = tape.constant(y.clone());
            let pid = tape.constant(ps.value("prior")?.clone());
            let out = fmu_forward(&mut tape, &ps, &cfg, &sys, yid, Some((pid, (2, 2))))?;
            let margin = tape
                .value(out)
                .data()
                .iter()
                .map(|v| v.min(1.0 - v))
                .fold(f64::INFINITY, f64::min);
            assert!(
                margin > 1e-3,
                "unfolding gradcheck fixture too close to clamp kink: {margin}"
            );
        }
        let sys_c = Arc::clone(&sys);
        let cfg_c = cfg.clone();
        check(&mut results, "e2e.fmu_forward.8x8x3", ps, max_coords, Box::new(move |t, p| {
            let yid = t.constant(y.clone());
            let pid = t.param(p, "prior")?;
            let out = fmu_forward(t, p, &cfg_c, &sys_c, yid, Some((pid, (2, 2))))?;
            let tgt = t.constant(target.clone());
            let d = t.sub(out, tgt)?;
            let sq = t.mul(d, d)?;
            Ok(t.mean_all(sq))
        }))?;
    }

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_under_tolerance() {
        let results = gradient_suite(4).unwrap();
        assert!(results.len() >= 25, "suite has {} checks", results.len());
        for r in &results {
            assert!(r.max_rel_err <= 1e-4, "{}: {}", r.name, r.max_rel_err);
        }
    }
}
