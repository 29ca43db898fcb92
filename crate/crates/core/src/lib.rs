pub mod curation;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod report;
pub mod sampling;
pub mod simlab;
pub mod strategy;
pub mod voc;

pub use error::{Error, Result};
