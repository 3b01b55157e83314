//! Deterministic synthetic hyperspectral scenes for desk-scale training and
//! evaluation. Scenes are low-rank: a few nonnegative spatial maps (Gaussian
//! blobs plus blurred noise) times smooth positive spectra, normalized to a
//! unit peak.

use crate::error::{Error, Result};
use crate::ndtensor::rng::Rng;
use crate::ndtensor::scalar::Scalar;
use crate::ndtensor::tensor::Tensor;
use crate::sensing::HsiCube;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    /// Number of spatial-map/spectrum pairs; capped at min(bands, 8).
    pub rank: usize,
    pub blobs: usize,
    /// Larger values give smoother spectra (fewer spline knots).
    pub smoothness: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn desk_default(seed: u64) -> Self {
        SceneSpec {
            width: 32,
            height: 32,
            bands: 8,
            rank: 3,
            blobs: 4,
            smoothness: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 || self.bands < 1 {
            return Err(Error::InvalidArgument(format!(
                "scene extents too small: {}x{}x{}",
                self.width, self.height, self.bands
            )));
        }
        if self.rank == 0 || self.rank > self.bands.min(8) {
            return Err(Error::InvalidArgument(format!(
                "scene rank {} outside 1..=min(bands, 8)",
                self.rank
            )));
        }
        if self.smoothness <= 0.0 {
            return Err(Error::InvalidArgument("smoothness must be > 0".into()));
        }
        Ok(())
    }
}

/// Catmull-Rom interpolation through `knots` sampled at `n` evenly spaced
/// positions spanning the knot range.
fn catmull_rom_curve(knots: &[f64], n: usize) -> Vec<f64> {
    let k = knots.len();
    debug_assert!(k >= 2);
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let pos = if n == 1 {
            0.0
        } else {
            s as f64 / (n - 1) as f64 * (k - 1) as f64
        };
        let seg = (pos.floor() as usize).min(k - 2);
        let t = pos - seg as f64;
        let p1 = knots[seg];
        let p2 = knots[seg + 1];
        let p0 = if seg == 0 { p1 } else { knots[seg - 1] };
        let p3 = if seg + 2 >= k { p2 } else { knots[seg + 2] };
        let t2 = t * t;
        let t3 = t2 * t;
        let v = 0.5
            * ((2.0 * p1)
                + (-p0 + p2) * t
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
                + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3);
        out.push(v);
    }
    out
}

/// Smooth positive spectrum over `bands` samples.
fn random_spectrum(rng: &mut Rng, bands: usize, smoothness: f64) -> Vec<f64> {
    let knots = ((bands as f64 / (2.5 * smoothness)).round() as usize).clamp(2, bands.max(2));
    let pts: Vec<f64> = (0..knots).map(|_| rng.uniform_in(0.25, 1.0)).collect();
    catmull_rom_curve(&pts, bands)
        .into_iter()
        .map(|v| v.max(0.05))
        .collect()
}

/// Nonnegative spatial map: Gaussian blobs plus Gaussian-blurred noise.
fn random_spatial(rng: &mut Rng, w: usize, h: usize, blobs: usize) -> Vec<f64> {
    let mut map = vec![0.0f64; w * h];
    for _ in 0..blobs {
        let cx = rng.uniform_in(0.0, w as f64);
        let cy = rng.uniform_in(0.0, h as f64);
        let s = rng.uniform_in(w as f64 / 8.0, w as f64 / 3.0);
        let amp = rng.uniform_in(0.3, 1.0);
        for i in 0..w {
            for j in 0..h {
                let dx = i as f64 - cx;
                let dy = j as f64 - cy;
                map[i * h + j] += amp * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
            }
        }
    }
    // blurred texture noise
    let noise: Vec<f64> = (0..w * h).map(|_| rng.uniform() - 0.5).collect();
    let radius = 2i64;
    let sig2 = 2.0 * 1.5 * 1.5;
    for i in 0..w as i64 {
        for j in 0..h as i64 {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for di in -radius..=radius {
                for dj in -radius..=radius {
                    let si = (i + di).rem_euclid(w as i64) as usize;
                    let sj = (j + dj).rem_euclid(h as i64) as usize;
                    let wgt = (-((di * di + dj * dj) as f64) / sig2).exp();
                    acc += wgt * noise[si * h as usize + sj];
                    wsum += wgt;
                }
            }
            map[(i * h as i64 + j) as usize] += 0.3 * acc / wsum;
        }
    }
    for v in &mut map {
        *v = v.max(0.0);
    }
    map
}

/// Deterministic scene synthesis. Same spec twice gives identical cubes.
pub fn generate<S: Scalar>(spec: &SceneSpec) -> Result<HsiCube<S>> {
    spec.validate()?;
    let (w, h, b) = (spec.width, spec.height, spec.bands);
    let root = Rng::new(spec.seed);
    let mut raw = vec![0.0f64; w * h * b];
    for k in 0..spec.rank {
        let mut srng = root.substream(&format!("spatial.{k}"));
        let mut crng = root.substream(&format!("spectrum.{k}"));
        let spatial = random_spatial(&mut srng, w, h, spec.blobs);
        let spectrum = random_spectrum(&mut crng, b, spec.smoothness);
        for (px, &sv) in spatial.iter().enumerate() {
            if sv == 0.0 {
                continue;
            }
            let base = px * b;
            for (l, &cv) in spectrum.iter().enumerate() {
                raw[base + l] += sv * cv;
            }
        }
    }
    let peak = raw.iter().cloned().fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let data: Vec<S> = raw
        .into_iter()
        .map(|v| S::from_f64((v * scale).clamp(0.0, 1.0)))
        .collect();
    HsiCube::from_unit_range(Tensor::from_vec(vec![w, h, b], data)?)
}

/// Disjoint, stable train/test scene specs derived from `base_seed`.
pub fn make_split(
    template: &SceneSpec,
    n_train: usize,
    n_test: usize,
    base_seed: u64,
) -> Result<(Vec<SceneSpec>, Vec<SceneSpec>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(
            "split needs n_train >= 1 and n_test >= 1".into(),
        ));
    }
    let root = Rng::new(base_seed);
    let spec_at = |tag: &str, i: usize| {
        let mut s = template.clone();
        s.seed = root.substream(&format!("scene.{tag}.{i}")).state().0;
        s
    };
    let train = (0..n_train).map(|i| spec_at("train", i)).collect();
    let test = (0..n_test).map(|i| spec_at("test", i)).collect();
    Ok((train, test))
}

/// Mean squared second difference along the band axis; the smoothness metric.
pub fn spectral_roughness<S: Scalar>(cube: &HsiCube<S>) -> f64 {
    let (w, h, b) = (cube.width(), cube.height(), cube.bands());
    if b < 3 {
        return 0.0;
    }
    let d = cube.tensor().data();
    let mut acc = 0.0;
    let mut n = 0usize;
    for px in 0..w * h {
        let base = px * b;
        for l in 1..b - 1 {
            let dd = d[base + l + 1].as_f64() - 2.0 * d[base + l].as_f64()
                + d[base + l - 1].as_f64();
            acc += dd * dd;
            n += 1;
        }
    }
    acc / n as f64
}
