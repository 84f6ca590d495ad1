pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod params;
pub mod sparse_fusion;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
