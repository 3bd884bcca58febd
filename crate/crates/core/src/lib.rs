pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
mod fsutil;
pub mod losses;
pub mod model;
pub mod nn;
pub mod span_predictor;
pub mod train;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
