pub mod chunking;
pub mod distill;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod schedule;
pub mod synthdata;

pub use error::{Error, Result};
