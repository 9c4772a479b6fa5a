pub mod checkpoint;
pub mod cli;
pub mod costvolume;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod networks;
pub mod renderer;
pub mod scenegen;
pub mod server;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
