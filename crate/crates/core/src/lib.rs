pub mod data;
pub mod error;
pub mod estimation;
pub mod lslo;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod pruning;
pub mod trainer;

pub use error::{Error, Result};
