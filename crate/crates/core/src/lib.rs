pub mod ablation;
pub mod alignment;
pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod linalg;
pub mod model;
pub mod model_check;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod value;

pub use error::{Error, Result};
pub use tensor::Tensor;
