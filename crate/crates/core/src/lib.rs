pub mod backbone;
pub mod bench;
pub mod boxes;
pub mod data;
pub mod error;
pub mod fcos;
pub mod gradsuite;
pub mod io;
pub mod mask;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
