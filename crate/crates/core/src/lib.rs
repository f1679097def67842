pub mod backbone;
pub mod checkpoint;
pub mod clip;
pub mod conditioner;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod fixtures;
pub mod fusion;
pub mod gradcheck;
pub mod image_io;
pub mod inference;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tensor};
