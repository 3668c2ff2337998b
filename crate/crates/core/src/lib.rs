pub mod bench;
pub mod cli;
pub mod error;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod operators;
pub mod pipeline;
pub mod simgen;
pub mod solver;
pub mod tuning;

pub use error::{Error, Result};
