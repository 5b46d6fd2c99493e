pub mod error;
pub mod aspire;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod nonamortized;
pub mod operators;
pub mod random;
pub mod summary;
pub mod wave2d;

pub use error::{Error, Result};
