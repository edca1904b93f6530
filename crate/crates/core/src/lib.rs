pub mod adaptation;
pub mod detector;
pub mod error;
pub mod eval;
pub mod nn;
pub mod scene;
pub mod session;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
