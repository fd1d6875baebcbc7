//! Tensor-ring compression of neural-network layers.

pub mod arch;
pub mod autodiff;
pub mod cost;
pub mod data;
pub mod error;
pub mod flops;
pub mod io;
pub mod layers;
pub mod model;
pub mod nn;
pub mod optim;
pub mod planner;
pub mod ring;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{contract, ConvSpec, DenseTensor};
