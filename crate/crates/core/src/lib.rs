pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod train;
pub mod transfer;
pub mod treedec;

pub use error::{Error, Result};
