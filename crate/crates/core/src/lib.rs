pub mod analysis;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nnops;
pub mod objectives;
pub mod par;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
