pub mod analysis;
pub mod cli;
pub mod desk;
pub mod error;
pub mod extract;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod router;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{GradPair, Tensor};
