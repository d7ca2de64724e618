pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod metrics;
pub mod partition;
pub(crate) mod seed;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
