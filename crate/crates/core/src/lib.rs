//! Desk-scale one-shot talking-head reenactment driven by a linear 3D
//! morphable face model and audio features.

pub mod audio;
pub mod autograd;
pub mod container;
pub mod error;
pub mod imaging;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod morphable;
pub mod networks;
pub mod rasterizer;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
