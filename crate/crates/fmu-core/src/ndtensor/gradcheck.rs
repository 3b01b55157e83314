//! Central-difference gradient verification. Runs in 64-bit mode only;
//! 32-bit rounding would drown the signal.

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::rng::Rng;
use super::scalar::Scalar;
use super::tape::{Tape, ValueId};

/// Max relative error between analytic and central-difference gradients over
/// sampled coordinates of every trainable parameter.
///
/// `f` must be a deterministic function of the store's values. Coordinates
/// are subsampled (`max_coords` per parameter) from a stream seeded by
/// `sample_seed`, so the check stays fast on large parameters.
pub fn grad_check<S, F>(
    f: F,
    params: &mut ParamStore<S>,
    eps: S,
    max_coords: usize,
    sample_seed: u64,
) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &ParamStore<S>) -> Result<ValueId>,
{
    if S::BITS != 64 {
        return Err(Error::InvalidArgument(
            "grad_check requires 64-bit verification mode".into(),
        ));
    }
    let e = eps.as_f64();
    if !(1e-7..=1e-3).contains(&e) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps {e} outside [1e-7, 1e-3]"
        )));
    }

    // Analytic pass.
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)?;

    let names: Vec<String> = params.names().to_vec();
    let mut analytic: Vec<(String, Vec<S>)> = Vec::new();
    for name in &names {
        let entry = params.get(name)?;
        if entry.trainable {
            analytic.push((name.clone(), entry.grad.data().to_vec()));
        }
    }

    let mut rng = Rng::new(sample_seed);
    let mut max_rel = 0.0f64;
    for (name, grads) in &analytic {
        let n = grads.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.below(n as u64) as usize).collect()
        };
        for &c in &coords {
            let orig = params.value(name)?.data()[c];

            params.value_mut(name)?.data_mut()[c] = orig + eps;
            let mut t = Tape::new();
            let lp = f(&mut t, params)?;
            let fp = t.value(lp).item().as_f64();

            params.value_mut(name)?.data_mut()[c] = orig - eps;
            let mut t = Tape::new();
            let lm = f(&mut t, params)?;
            let fm = t.value(lm).item().as_f64();

            params.value_mut(name)?.data_mut()[c] = orig;

            let numeric = (fp - fm) / (2.0 * e);
            let a = grads[c].as_f64();
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("grad_check of '{name}'[{c}]")));
            }
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::rng::rand_normal;
    use crate::ndtensor::tensor::Tensor;

    #[test]
    fn relu_of_positive_weights() {
        let mut ps = ParamStore::<f64>::new(1);
        ps.insert(
            "w",
            rand_normal::<f64>(&mut Rng::new(2), &[6]).map(|v| v.abs() + 0.5),
            true,
        )
        .unwrap();
        let err = grad_check(
            |t, ps| {
                let w = t.param(ps, "w")?;
                let r = t.relu(w);
                Ok(t.sum_all(r))
            },
            &mut ps,
            1e-5,
            16,
            7,
        )
        .unwrap();
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn constant_function_has_tiny_error() {
        let mut ps = ParamStore::<f64>::new(1);
        ps.insert("w", Tensor::ones(&[4]), true).unwrap();
        let err = grad_check(
            |t, _ps| {
                let c = t.constant(Tensor::scalar(3.5));
                Ok(t.sum_all(c))
            },
            &mut ps,
            1e-4,
            8,
            7,
        )
        .unwrap();
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn rejects_f32_mode() {
        let mut ps = ParamStore::<f32>::new(1);
        ps.insert("w", Tensor::ones(&[2]), true).unwrap();
        let r = grad_check(
            |t, ps| {
                let w = t.param(ps, "w")?;
                Ok(t.sum_all(w))
            },
            &mut ps,
            1e-4,
            4,
            7,
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let mut ps = ParamStore::<f64>::new(1);
        ps.insert("w", Tensor::ones(&[2]), true).unwrap();
        let r = grad_check(
            |t, ps| {
                let w = t.param(ps, "w")?;
                Ok(t.sum_all(w))
            },
            &mut ps,
            1e-2,
            4,
            7,
        );
        assert!(r.is_err());
    }
}
