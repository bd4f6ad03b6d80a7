pub mod eh;
pub mod error;
pub mod hashcore;
pub mod lh;
pub mod metrics;
pub mod persist;
pub mod reclaim;
pub mod segment;
pub mod table;

pub use error::{Error, Result};
