#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod kan;
pub mod model;
pub mod koopman;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod physics;
pub mod preprocess;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
