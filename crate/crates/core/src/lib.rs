mod binary;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, Result};
