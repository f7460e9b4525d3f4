pub mod config;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod ot;
pub mod par;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tensor::Tape<Real>;
/// A `[channels, height, width]` amplitude grid.
pub type Image = tensor::Tensor<Real>;
pub type Net = nets::Net<Real>;
