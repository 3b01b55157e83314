//! Snapshot spectral compressive imaging toolkit.
//!
//! Simulates CASSI and optical-filter hyperspectral acquisition and reconstructs
//! datacubes with an N-stage GAP deep-unfolding engine whose denoisers are guided
//! by a flow-matching prior over a learned latent space.
//!
//! All numerical code is generic over the scalar type (`f32` for training,
//! `f64` for gradient verification); concrete aliases live at the crate root.

pub mod error;
pub mod flowmatch;
pub mod io;
pub mod metrics;
pub mod ndtensor;
pub mod nnblocks;
pub mod sensing;
pub mod synthdata;
pub mod training;
pub mod unfolding;
pub mod verify;

pub use error::{Error, Result};
pub use ndtensor::scalar::Scalar;
pub use ndtensor::tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;

pub type HsiCube32 = sensing::HsiCube<f32>;
pub type HsiCube64 = sensing::HsiCube<f64>;
pub type SensingSystem32 = sensing::SensingSystem<f32>;
pub type SensingSystem64 = sensing::SensingSystem<f64>;
pub type ParamStore32 = ndtensor::params::ParamStore<f32>;
pub type ParamStore64 = ndtensor::params::ParamStore<f64>;
pub type Tape32 = ndtensor::tape::Tape<f32>;
pub type Tape64 = ndtensor::tape::Tape<f64>;
