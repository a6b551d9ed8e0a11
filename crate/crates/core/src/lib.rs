pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
