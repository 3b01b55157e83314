//! Forward models and adjoint/pseudoinverse operators for CASSI and
//! optical-filter acquisition.
//!
//! A CASSI system masks each band with a shared 2-D pattern and shears band
//! `l` (0-based) by `l*d` pixels along the second spatial axis before summing
//! onto the sensor; a filter system applies a per-band 2-D transmittance mask
//! with no shear. Both yield a sensing matrix whose columns each hit exactly
//! one measurement pixel, so `Phi Phi^T` is diagonal and the pseudoinverse is
//! a cheap per-pixel rescale.

use crate::error::{Error, Result};
use crate::ndtensor::rng::Rng;
use crate::ndtensor::scalar::Scalar;
use crate::ndtensor::tensor::Tensor;

/// 3-D hyperspectral datacube, shape `[W, H, bands]`, band index fastest.
/// Values are in `[0, 1]` after load or generation; algorithm intermediates
/// may leave that range.
#[derive(Debug, Clone)]
pub struct HsiCube<S> {
    values: Tensor<S>,
}

impl<S: Scalar> HsiCube<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "HsiCube::new",
                detail: format!("want rank 3, got {:?}", values.shape()),
            });
        }
        Ok(HsiCube { values })
    }

    /// Constructor for data entering the signal domain: enforces `[0, 1]`.
    pub fn from_unit_range(values: Tensor<S>) -> Result<Self> {
        let cube = Self::new(values)?;
        let bad = cube
            .values
            .data()
            .iter()
            .any(|&v| !v.is_finite() || v < S::zero() || v > S::one());
        if bad {
            return Err(Error::InvalidArgument(
                "cube values must lie in [0, 1]".into(),
            ));
        }
        Ok(cube)
    }

    pub fn width(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.values
    }
}

/// 2-D compressed sensor image, shape `[W, H_meas]`.
#[derive(Debug, Clone)]
pub struct Measurement<S> {
    values: Tensor<S>,
}

impl<S: Scalar> Measurement<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "Measurement::new",
                detail: format!("want rank 2, got {:?}", values.shape()),
            });
        }
        Ok(Measurement { values })
    }

    pub fn width(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensingMode {
    /// Shared 2-D mask, band `l` sheared by `l*shift` along H.
    Cassi { shift: usize },
    /// Per-band 2-D mask, no shear.
    Filter,
}

/// Mask cube plus geometry; realizes `Phi`, `Phi^T` and `Phi^dagger`.
#[derive(Debug, Clone)]
pub struct SensingSystem<S> {
    mode: SensingMode,
    /// `[W, H]` base mask for CASSI; `[W, H, bands]` mask cube for Filter.
    mask: Tensor<S>,
    width: usize,
    height: usize,
    bands: usize,
    sigma: S,
    /// Clamped `diag(Phi Phi^T)` as a `[W, H_meas]` tensor.
    diag: Tensor<S>,
}

/// Clamp floor for degenerate (dead-pixel) diagonal entries.
pub const DIAG_EPS: f64 = 1e-8;

impl<S: Scalar> SensingSystem<S> {
    pub fn cassi(mask: Tensor<S>, bands: usize, shift: usize, sigma: S) -> Result<Self> {
        if mask.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "SensingSystem::cassi",
                detail: format!("base mask must be rank 2, got {:?}", mask.shape()),
            });
        }
        if bands == 0 {
            return Err(Error::InvalidArgument("bands must be >= 1".into()));
        }
        validate_mask_range(&mask)?;
        let (width, height) = (mask.shape()[0], mask.shape()[1]);
        let mut sys = SensingSystem {
            mode: SensingMode::Cassi { shift },
            mask,
            width,
            height,
            bands,
            sigma,
            diag: Tensor::zeros(&[0, 0]),
        };
        sys.diag = sys.compute_diag();
        Ok(sys)
    }

    pub fn filter(mask: Tensor<S>, sigma: S) -> Result<Self> {
        if mask.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "SensingSystem::filter",
                detail: format!("mask cube must be rank 3, got {:?}", mask.shape()),
            });
        }
        validate_mask_range(&mask)?;
        let (width, height, bands) = (mask.shape()[0], mask.shape()[1], mask.shape()[2]);
        let mut sys = SensingSystem {
            mode: SensingMode::Filter,
            mask,
            width,
            height,
            bands,
            sigma,
            diag: Tensor::zeros(&[0, 0]),
        };
        sys.diag = sys.compute_diag();
        Ok(sys)
    }

    pub fn mode(&self) -> SensingMode {
        self.mode
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn sigma(&self) -> S {
        self.sigma
    }

    pub fn mask(&self) -> &Tensor<S> {
        &self.mask
    }

    fn shift(&self) -> usize {
        match self.mode {
            SensingMode::Cassi { shift } => shift,
            SensingMode::Filter => 0,
        }
    }

    /// Measurement height: `H` for Filter, `H + (bands-1)*shift` for CASSI.
    pub fn meas_height(&self) -> usize {
        self.height + (self.bands - 1) * self.shift()
    }

    /// Mask value applied to cube voxel `(i, j, l)`.
    fn mask_at(&self, i: usize, j: usize, l: usize) -> S {
        match self.mode {
            SensingMode::Cassi { .. } => self.mask.data()[i * self.height + j],
            SensingMode::Filter => {
                self.mask.data()[(i * self.height + j) * self.bands + l]
            }
        }
    }

    fn check_cube_shape(&self, t: &Tensor<S>) -> Result<()> {
        if t.shape() != [self.width, self.height, self.bands] {
            return Err(Error::ShapeMismatch {
                op: "sensing",
                detail: format!(
                    "cube {:?} vs system [{}, {}, {}]",
                    t.shape(),
                    self.width,
                    self.height,
                    self.bands
                ),
            });
        }
        Ok(())
    }

    fn check_meas_shape(&self, t: &Tensor<S>) -> Result<()> {
        if t.shape() != [self.width, self.meas_height()] {
            return Err(Error::ShapeMismatch {
                op: "sensing",
                detail: format!(
                    "measurement {:?} vs system [{}, {}]",
                    t.shape(),
                    self.width,
                    self.meas_height()
                ),
            });
        }
        Ok(())
    }

    /// Noiseless operator application `Phi x` on a raw cube tensor.
    pub fn forward_raw(&self, cube: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_cube_shape(cube)?;
        let (w, h, b) = (self.width, self.height, self.bands);
        let hm = self.meas_height();
        let d = self.shift();
        let mut y = Tensor::zeros(&[w, hm]);
        let xd = cube.data();
        let yd = y.data_mut();
        for i in 0..w {
            for j in 0..h {
                let xbase = (i * h + j) * b;
                for l in 0..b {
                    let m = self.mask_at(i, j, l);
                    yd[i * hm + (j + l * d)] += xd[xbase + l] * m;
                }
            }
        }
        Ok(y)
    }

    /// `Phi x` with typed ends.
    pub fn forward(&self, x: &HsiCube<S>) -> Result<Measurement<S>> {
        Measurement::new(self.forward_raw(x.tensor())?)
    }

    /// Acquisition model: `Phi x + eta`, `eta ~ N(0, sigma^2)` from the given
    /// stream. `sigma = 0` gives the noiseless model. Noise enters only here,
    /// never in adjoint/pinv.
    pub fn simulate(&self, x: &HsiCube<S>, rng: &mut Rng) -> Result<Measurement<S>> {
        let mut y = self.forward_raw(x.tensor())?;
        if self.sigma > S::zero() {
            let s = self.sigma;
            for v in y.data_mut() {
                *v += s * S::from_f64(rng.normal());
            }
        }
        Measurement::new(y)
    }

    /// `Phi^T y` on a raw measurement tensor: un-shift and re-mask per band.
    pub fn adjoint_raw(&self, meas: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_meas_shape(meas)?;
        let (w, h, b) = (self.width, self.height, self.bands);
        let hm = self.meas_height();
        let d = self.shift();
        let mut x = Tensor::zeros(&[w, h, b]);
        let yd = meas.data();
        let xd = x.data_mut();
        for i in 0..w {
            for j in 0..h {
                let xbase = (i * h + j) * b;
                for l in 0..b {
                    let m = self.mask_at(i, j, l);
                    xd[xbase + l] = yd[i * hm + (j + l * d)] * m;
                }
            }
        }
        Ok(x)
    }

    pub fn adjoint(&self, y: &Measurement<S>) -> Result<HsiCube<S>> {
        HsiCube::new(self.adjoint_raw(y.tensor())?)
    }

    fn compute_diag(&self) -> Tensor<S> {
        let (w, h, b) = (self.width, self.height, self.bands);
        let hm = self.meas_height();
        let d = self.shift();
        let eps = S::from_f64(DIAG_EPS);
        let mut diag = Tensor::zeros(&[w, hm]);
        let dd = diag.data_mut();
        for i in 0..w {
            for j in 0..h {
                for l in 0..b {
                    let m = self.mask_at(i, j, l);
                    dd[i * hm + (j + l * d)] += m * m;
                }
            }
        }
        for v in dd.iter_mut() {
            if *v < eps {
                *v = eps;
            }
        }
        diag
    }

    /// Clamped `diag(Phi Phi^T)`, shape `[W, H_meas]`.
    pub fn phi_phit_diag(&self) -> &Tensor<S> {
        &self.diag
    }

    /// `Phi^dagger y = Phi^T (Phi Phi^T)^{-1} y` with the diagonal clamped at
    /// [`DIAG_EPS`] so dead pixels degrade gracefully.
    pub fn pinv_raw(&self, meas: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_meas_shape(meas)?;
        let scaled = meas.zip(&self.diag, |y, d| y / d)?;
        self.adjoint_raw(&scaled)
    }

    pub fn pinv_apply(&self, y: &Measurement<S>) -> Result<HsiCube<S>> {
        HsiCube::new(self.pinv_raw(y.tensor())?)
    }

    /// Vector-Jacobian product of `pinv_raw`: `(Phi^dagger)^T g = (Phi g) / diag`.
    pub fn pinv_vjp(&self, cube_grad: &Tensor<S>) -> Result<Tensor<S>> {
        let fwd = self.forward_raw(cube_grad)?;
        fwd.zip(&self.diag, |g, d| g / d)
    }

    /// Explicit dense sensing matrix, rows = measurement pixels, cols = cube
    /// voxels, both in the band-slowest vec order of [`vec_cube`]. Test-only
    /// oracle; guarded to small systems.
    pub fn build_dense(&self) -> Result<DenseSensing<S>> {
        if self.width * self.height > 4096 {
            return Err(Error::InvalidArgument(format!(
                "build_dense limited to W*H <= 4096, got {}",
                self.width * self.height
            )));
        }
        let (w, h, b) = (self.width, self.height, self.bands);
        let hm = self.meas_height();
        let d = self.shift();
        let rows = w * hm;
        let cols = w * h * b;
        let mut data = vec![S::zero(); rows * cols];
        for l in 0..b {
            for i in 0..w {
                for j in 0..h {
                    let row = i * hm + (j + l * d);
                    let col = l * (w * h) + i * h + j;
                    data[row * cols + col] = self.mask_at(i, j, l);
                }
            }
        }
        Ok(DenseSensing { rows, cols, data })
    }
}

fn validate_mask_range<S: Scalar>(mask: &Tensor<S>) -> Result<()> {
    if mask
        .data()
        .iter()
        .any(|&v| !v.is_finite() || v < S::zero() || v > S::one())
    {
        return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Vectorize a cube band-slowest: index `l*(W*H) + i*H + j`, matching the
/// block form `Phi = [D_1, ..., D_bands]`.
pub fn vec_cube<S: Scalar>(cube: &Tensor<S>) -> Vec<S> {
    let (w, h, b) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
    let mut out = vec![S::zero(); w * h * b];
    let d = cube.data();
    for i in 0..w {
        for j in 0..h {
            for l in 0..b {
                out[l * (w * h) + i * h + j] = d[(i * h + j) * b + l];
            }
        }
    }
    out
}

/// Inverse of [`vec_cube`].
pub fn unvec_cube<S: Scalar>(v: &[S], w: usize, h: usize, b: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(&[w, h, b]);
    let d = out.data_mut();
    for i in 0..w {
        for j in 0..h {
            for l in 0..b {
                d[(i * h + j) * b + l] = v[l * (w * h) + i * h + j];
            }
        }
    }
    out
}

/// Row-major dense sensing matrix (oracle helper).
#[derive(Debug, Clone)]
pub struct DenseSensing<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> DenseSensing<S> {
    pub fn apply(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![S::zero(); self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = S::zero();
            for (a, b) in row.iter().zip(x) {
                acc += *a * *b;
            }
            y[r] = acc;
        }
        y
    }

    pub fn apply_transpose(&self, y: &[S]) -> Vec<S> {
        debug_assert_eq!(y.len(), self.rows);
        let mut x = vec![S::zero(); self.cols];
        for r in 0..self.rows {
            let yr = y[r];
            if yr == S::zero() {
                continue;
            }
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (xv, a) in x.iter_mut().zip(row) {
                *xv += *a * yr;
            }
        }
        x
    }
}

/// Random system + cube helpers shared by tests and the acceptance suite.
pub mod testgen {
    use super::*;

    /// Uniform mask values in `[lo, hi]` (clamped to the legal range).
    pub fn random_mask<S: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.uniform_in(lo, hi).clamp(0.0, 1.0)))
            .collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    pub fn random_cube<S: Scalar>(rng: &mut Rng, w: usize, h: usize, b: usize) -> HsiCube<S> {
        let data = (0..w * h * b)
            .map(|_| S::from_f64(rng.uniform()))
            .collect();
        HsiCube::new(Tensor::from_vec(vec![w, h, b], data).unwrap()).unwrap()
    }

    /// Random system of either mode; masks from `[lo, hi]`.
    pub fn random_system<S: Scalar>(
        rng: &mut Rng,
        w: usize,
        h: usize,
        b: usize,
        cassi: bool,
        shift: usize,
        lo: f64,
        hi: f64,
    ) -> SensingSystem<S> {
        if cassi {
            let mask = random_mask(rng, &[w, h], lo, hi);
            SensingSystem::cassi(mask, b, shift, S::zero()).unwrap()
        } else {
            let mask = random_mask(rng, &[w, h, b], lo, hi);
            SensingSystem::filter(mask, S::zero()).unwrap()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testgen::*;
    use super::*;

    fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
    }

    #[test]
    fn single_band_all_ones_mask_is_identity() {
        let mask = Tensor::<f64>::ones(&[4, 5, 1]);
        let sys = SensingSystem::filter(mask, 0.0).unwrap();
        let x = random_cube::<f64>(&mut Rng::new(1), 4, 5, 1);
        let y = sys.forward(&x).unwrap();
        assert_eq!(y.tensor().data(), x.tensor().data());
        // pinv of y is y back
        let back = sys.pinv_apply(&y).unwrap();
        for (a, b) in back.tensor().data().iter().zip(x.tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cube_zero_measurement() {
        let sys = random_system::<f64>(&mut Rng::new(2), 6, 6, 3, true, 1, 0.0, 1.0);
        let x = HsiCube::new(Tensor::zeros(&[6, 6, 3])).unwrap();
        let y = sys.forward(&x).unwrap();
        assert!(y.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cassi_measurement_height() {
        let sys = random_system::<f32>(&mut Rng::new(3), 5, 7, 4, true, 2, 0.0, 1.0);
        assert_eq!(sys.meas_height(), 7 + 3 * 2);
        let x = random_cube::<f32>(&mut Rng::new(4), 5, 7, 4);
        let y = sys.forward(&x).unwrap();
        assert_eq!(y.tensor().shape(), &[5, 13]);
    }

    #[test]
    fn adjoint_identity_holds() {
        // <Phi x, y> == <x, Phi^T y> across modes
        let mut rng = Rng::new(5);
        for case in 0..100 {
            let cassi = case % 2 == 0;
            let sys = random_system::<f64>(&mut rng, 4, 5, 3, cassi, 1, 0.0, 1.0);
            let x = random_cube::<f64>(&mut rng, 4, 5, 3);
            let ydata = (0..4 * sys.meas_height())
                .map(|_| rng.uniform() - 0.5)
                .collect::<Vec<f64>>();
            let y = Measurement::new(
                Tensor::from_vec(vec![4, sys.meas_height()], ydata).unwrap(),
            )
            .unwrap();
            let fx = sys.forward(&x).unwrap();
            let aty = sys.adjoint(&y).unwrap();
            let lhs = dot(fx.tensor().data(), y.tensor().data());
            let rhs = dot(x.tensor().data(), aty.tensor().data());
            assert!((lhs - rhs).abs() < 1e-10, "case {case}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn filter_all_ones_adjoint_stacks_copies() {
        let mask = Tensor::<f64>::ones(&[3, 3, 2]);
        let sys = SensingSystem::filter(mask, 0.0).unwrap();
        let ydata: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let y = Measurement::new(Tensor::from_vec(vec![3, 3], ydata).unwrap()).unwrap();
        let cube = sys.adjoint(&y).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v = y.tensor().at(&[i, j]);
                assert_eq!(cube.tensor().at(&[i, j, 0]), v);
                assert_eq!(cube.tensor().at(&[i, j, 1]), v);
            }
        }
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let mut rng = Rng::new(6);
        for case in 0..20 {
            let cassi = case % 2 == 0;
            let sys = random_system::<f64>(&mut rng, 4, 4, 3, cassi, 1, 0.0, 1.0);
            let x = random_cube::<f64>(&mut rng, 4, 4, 3);
            let dense = sys.build_dense().unwrap();
            let y_fast = sys.forward(&x).unwrap();
            let y_dense = dense.apply(&vec_cube(x.tensor()));
            for (i, &yd) in y_dense.iter().enumerate() {
                let r = i / sys.meas_height();
                let c = i % sys.meas_height();
                let diff = (y_fast.tensor().at(&[r, c]) - yd).abs();
                assert!(diff < 1e-12, "case {case} pixel {i}");
            }
        }
    }

    #[test]
    fn adjoint_matches_dense_oracle() {
        let mut rng = Rng::new(7);
        let sys = random_system::<f64>(&mut rng, 3, 4, 2, true, 1, 0.0, 1.0);
        let hm = sys.meas_height();
        let ydata: Vec<f64> = (0..3 * hm).map(|_| rng.uniform() - 0.5).collect();
        let y = Measurement::new(Tensor::from_vec(vec![3, hm], ydata.clone()).unwrap()).unwrap();
        let dense = sys.build_dense().unwrap();
        let want = dense.apply_transpose(&ydata);
        let got = vec_cube(sys.adjoint(&y).unwrap().tensor());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_row_norms_equal_sqrt_diag() {
        let mut rng = Rng::new(8);
        let sys = random_system::<f64>(&mut rng, 4, 4, 3, false, 0, 0.0, 1.0);
        let dense = sys.build_dense().unwrap();
        let diag = sys.phi_phit_diag();
        for r in 0..dense.rows {
            let row = &dense.data[r * dense.cols..(r + 1) * dense.cols];
            let norm2: f64 = row.iter().map(|v| v * v).sum();
            let i = r / sys.meas_height();
            let j = r % sys.meas_height();
            assert!((norm2 - diag.at(&[i, j])).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_columns_hit_one_pixel() {
        // structural reason Phi Phi^T is diagonal
        let mut rng = Rng::new(9);
        for cassi in [false, true] {
            let sys = random_system::<f64>(&mut rng, 3, 4, 3, cassi, 2, 0.1, 1.0);
            let dense = sys.build_dense().unwrap();
            for c in 0..dense.cols {
                let nz = (0..dense.rows)
                    .filter(|r| dense.data[r * dense.cols + c] != 0.0)
                    .count();
                assert!(nz <= 1, "column {c} has {nz} nonzeros");
            }
        }
    }

    #[test]
    fn projection_reaches_measurement_consistency() {
        // x = theta + pinv(y - Phi theta) satisfies Phi x == y on live pixels
        let mut rng = Rng::new(10);
        for case in 0..50 {
            let cassi = case % 2 == 1;
            let sys = random_system::<f64>(&mut rng, 5, 6, 4, cassi, 1, 0.0, 1.0);
            let x = random_cube::<f64>(&mut rng, 5, 6, 4);
            let y = sys.forward(&x).unwrap();
            let theta = random_cube::<f64>(&mut rng, 5, 6, 4);
            let resid = y
                .tensor()
                .zip(sys.forward(&theta).unwrap().tensor(), |a, b| a - b)
                .unwrap();
            let corr = sys.pinv_raw(&resid).unwrap();
            let proj = theta.tensor().zip(&corr, |a, b| a + b).unwrap();
            let yy = sys
                .forward_raw(&proj)
                .unwrap();
            let diag = sys.phi_phit_diag();
            for (idx, (a, b)) in yy.data().iter().zip(y.tensor().data()).enumerate() {
                if diag.data()[idx] > DIAG_EPS {
                    assert!((a - b).abs() < 1e-10, "case {case} pixel {idx}");
                }
            }
        }
    }

    #[test]
    fn cassi_zero_shift_replicated_mask_equals_filter() {
        let mut rng = Rng::new(11);
        let base = testgen::random_mask::<f64>(&mut rng, &[4, 5], 0.0, 1.0);
        let mut cube_mask = Tensor::zeros(&[4, 5, 3]);
        for i in 0..4 {
            for j in 0..5 {
                for l in 0..3 {
                    cube_mask.set(&[i, j, l], base.at(&[i, j]));
                }
            }
        }
        let cassi = SensingSystem::cassi(base, 3, 0, 0.0).unwrap();
        let filter = SensingSystem::filter(cube_mask, 0.0).unwrap();
        let x = random_cube::<f64>(&mut rng, 4, 5, 3);
        let ya = cassi.forward(&x).unwrap();
        let yb = filter.forward(&x).unwrap();
        assert_eq!(ya.tensor().data(), yb.tensor().data());
    }

    #[test]
    fn forward_is_linear() {
        let mut rng = Rng::new(12);
        let sys = random_system::<f64>(&mut rng, 4, 4, 3, true, 2, 0.0, 1.0);
        let x1 = random_cube::<f64>(&mut rng, 4, 4, 3);
        let x2 = random_cube::<f64>(&mut rng, 4, 4, 3);
        let (a, b) = (0.7, -1.3);
        let combo = x1.tensor().map(|v| a * v).zip(&x2.tensor().map(|v| b * v), |p, q| p + q).unwrap();
        let lhs = sys.forward_raw(&combo).unwrap();
        let y1 = sys.forward(&x1).unwrap();
        let y2 = sys.forward(&x2).unwrap();
        for (idx, v) in lhs.data().iter().enumerate() {
            let want = a * y1.tensor().data()[idx] + b * y2.tensor().data()[idx];
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_band_mismatch_is_error() {
        let mask = Tensor::<f32>::ones(&[4, 4, 2]);
        let sys = SensingSystem::filter(mask, 0.0).unwrap();
        let x = random_cube::<f32>(&mut Rng::new(13), 4, 4, 3);
        assert!(sys.forward(&x).is_err());
    }

    #[test]
    fn noise_comes_from_caller_stream() {
        let mask = Tensor::<f64>::ones(&[4, 4, 2]);
        let sys = SensingSystem::filter(mask, 0.05).unwrap();
        let x = random_cube::<f64>(&mut Rng::new(14), 4, 4, 2);
        let y1 = sys.simulate(&x, &mut Rng::new(42)).unwrap();
        let y2 = sys.simulate(&x, &mut Rng::new(42)).unwrap();
        let y3 = sys.simulate(&x, &mut Rng::new(43)).unwrap();
        assert_eq!(y1.tensor().data(), y2.tensor().data());
        assert_ne!(y1.tensor().data(), y3.tensor().data());
        // noiseless operator stays pure
        let clean = sys.forward(&x).unwrap();
        assert_ne!(clean.tensor().data(), y1.tensor().data());
    }

    #[test]
    fn build_dense_size_guard() {
        let mask = Tensor::<f32>::ones(&[128, 64, 1]);
        let sys = SensingSystem::filter(mask, 0.0).unwrap();
        assert!(sys.build_dense().is_err());
    }
}
