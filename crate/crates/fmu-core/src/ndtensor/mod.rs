//! Dense N-dimensional tensors plus a minimal reverse-mode differentiation
//! engine. Everything trainable in the toolkit runs through the [`tape::Tape`].

pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use params::ParamStore;
pub use rng::{rand_normal, Rng};
pub use scalar::Scalar;
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;
