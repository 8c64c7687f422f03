pub mod cli;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod numkernel;
pub mod schedule;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
