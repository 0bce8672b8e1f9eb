pub mod checks;
pub mod cli;
pub mod config;
pub mod dct;
pub mod error;
pub mod fista;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optics;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
