//! Reconstruction quality metrics: PSNR and per-band SSIM over cubes.

use crate::error::{Error, Result};
use crate::ndtensor::scalar::Scalar;
use crate::sensing::HsiCube;

/// PSNR result; identical inputs get a sentinel instead of an infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn as_db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            Psnr::Identical => None,
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Identical => write!(f, "identical"),
        }
    }
}

/// `10 log10(range^2 / MSE)` over all voxels, accumulated in f64.
pub fn psnr<S: Scalar>(a: &HsiCube<S>, b: &HsiCube<S>, range: f64) -> Result<Psnr> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            detail: format!("{:?} vs {:?}", a.tensor().shape(), b.tensor().shape()),
        });
    }
    let mut acc = 0.0f64;
    for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    let mse = acc / a.tensor().numel() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(10.0 * (range * range / mse).log10()))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Per-band 2-D SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03,
/// data range 1.0) averaged over valid window positions and bands.
pub fn ssim<S: Scalar>(a: &HsiCube<S>, b: &HsiCube<S>) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            detail: format!("{:?} vs {:?}", a.tensor().shape(), b.tensor().shape()),
        });
    }
    let (w, h, bands) = (a.width(), a.height(), a.bands());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs spatial dims >= {SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let ad = a.tensor().data();
    let bd = b.tensor().data();

    let mut band_mean = 0.0f64;
    for l in 0..bands {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for i in 0..=w - SSIM_WINDOW {
            for j in 0..=h - SSIM_WINDOW {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let wt = win[di * SSIM_WINDOW + dj];
                        let av = ad[((i + di) * h + (j + dj)) * bands + l].as_f64();
                        let bv = bd[((i + di) * h + (j + dj)) * bands + l].as_f64();
                        mu_a += wt * av;
                        mu_b += wt * bv;
                        aa += wt * av * av;
                        bb += wt * bv * bv;
                        ab += wt * av * bv;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                acc += num / den;
                count += 1;
            }
        }
        band_mean += acc / count as f64;
    }
    Ok(band_mean / bands as f64)
}

/// Per-scene evaluation entry.
#[derive(Debug, Clone)]
pub struct SceneEval {
    pub name: String,
    pub psnr: Psnr,
    pub ssim: f64,
}

/// Evaluation summary. The runtime is console-only; serialized reports stay
/// byte-identical across runs with the same seed.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    pub config_hash: String,
    pub seed: u64,
    pub runtime_ms: u128,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        let vals: Vec<f64> = self.scenes.iter().filter_map(|s| s.psnr.as_db()).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn mean_ssim(&self) -> f64 {
        if self.scenes.is_empty() {
            return 0.0;
        }
        self.scenes.iter().map(|s| s.ssim).sum::<f64>() / self.scenes.len() as f64
    }

    pub fn median_psnr(&self) -> Option<f64> {
        let mut vals: Vec<f64> = self.scenes.iter().filter_map(|s| s.psnr.as_db()).collect();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len();
        Some(if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::rng::Rng;
    use crate::ndtensor::tensor::Tensor;
    use crate::sensing::testgen::random_cube;

    fn offset_cube(a: &HsiCube<f64>, off: f64) -> HsiCube<f64> {
        HsiCube::new(a.tensor().map(|v| v + off)).unwrap()
    }

    #[test]
    fn psnr_of_constant_offset_is_twenty_db() {
        let a = random_cube::<f64>(&mut Rng::new(1), 12, 12, 4);
        let a = HsiCube::new(a.tensor().map(|v| v * 0.5)).unwrap();
        let b = offset_cube(&a, 0.1);
        match psnr(&a, &b, 1.0).unwrap() {
            Psnr::Db(v) => assert!((v - 20.0).abs() < 1e-3, "{v}"),
            Psnr::Identical => panic!("not identical"),
        }
    }

    #[test]
    fn identical_inputs_get_sentinel() {
        let a = random_cube::<f32>(&mut Rng::new(2), 12, 12, 3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Psnr::Identical);
    }

    #[test]
    fn psnr_matches_direct_mse_oracle() {
        let a = random_cube::<f64>(&mut Rng::new(3), 14, 13, 5);
        let b = random_cube::<f64>(&mut Rng::new(4), 14, 13, 5);
        // independent direct computation
        let n = a.tensor().numel();
        let mse: f64 = a
            .tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
        let want = 10.0 * (1.0 / mse).log10();
        match psnr(&a, &b, 1.0).unwrap() {
            Psnr::Db(v) => assert!((v - want).abs() < 1e-12),
            Psnr::Identical => panic!(),
        }
    }

    #[test]
    fn psnr_symmetric_and_monotone_in_noise() {
        let a = random_cube::<f64>(&mut Rng::new(5), 16, 16, 3);
        let mut last = f64::INFINITY;
        for (k, amp) in [0.01, 0.02, 0.05, 0.1, 0.2].iter().enumerate() {
            let mut rng = Rng::new(100 + k as u64);
            let noise: Vec<f64> = (0..a.tensor().numel())
                .map(|_| amp * (rng.uniform() - 0.5))
                .collect();
            let mut nt = a.tensor().clone();
            for (v, n) in nt.data_mut().iter_mut().zip(&noise) {
                *v += n;
            }
            let noisy = HsiCube::new(nt).unwrap();
            let p = psnr(&a, &noisy, 1.0).unwrap().as_db().unwrap();
            let q = psnr(&noisy, &a, 1.0).unwrap().as_db().unwrap();
            assert_eq!(p, q, "psnr symmetric");
            assert!(p < last, "amp {amp}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let a = random_cube::<f64>(&mut Rng::new(6), 16, 16, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let c = HsiCube::new(Tensor::full(&[12, 12, 1], 0.42f64)).unwrap();
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_inverted_image_is_low() {
        // fixed 16x16 block pattern
        let mut t = Tensor::<f64>::zeros(&[16, 16, 1]);
        for i in 0..16 {
            for j in 0..16 {
                let v = if (i / 2 + j / 3) % 2 == 0 { 0.15 } else { 0.85 };
                t.set(&[i, j, 0], v);
            }
        }
        let a = HsiCube::new(t.clone()).unwrap();
        let b = HsiCube::new(t.map(|v| 1.0 - v)).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.5, "ssim {s}");
        // symmetric
        assert!((ssim(&b, &a).unwrap() - s).abs() < 1e-15);
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = random_cube::<f32>(&mut Rng::new(7), 8, 8, 1);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = random_cube::<f32>(&mut Rng::new(8), 12, 12, 2);
        let b = random_cube::<f32>(&mut Rng::new(8), 12, 12, 3);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b).is_err());
    }
}
