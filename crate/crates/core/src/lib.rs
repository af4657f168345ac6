pub mod corpus;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod masking;
pub mod numerics;
pub mod objectives;
pub mod params;

pub use error::{Error, Result};
