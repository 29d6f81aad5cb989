pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod label;
pub mod layers;
pub mod metrics;
pub mod networks;
mod linalg;
pub mod optim;
pub mod triplet;
pub mod tensor;

pub use error::{Error, Result};
pub use label::Label;
pub use tensor::Tensor;
