pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encdec;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod memory;
pub mod model;
pub mod oracle;
pub mod reasoner;
pub mod taskgen;
pub mod temporal;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
