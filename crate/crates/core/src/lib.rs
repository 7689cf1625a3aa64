pub mod attention;
pub mod data;
pub mod error;
pub mod losses;
pub mod retrieval;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor, TensorId};
