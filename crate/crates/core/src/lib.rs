pub mod adapter;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod material;
pub mod model;
pub mod ops;
pub mod params;
pub mod render;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
