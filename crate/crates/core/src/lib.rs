pub mod corpus;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod model;
pub mod segment;
pub mod synth;
pub mod timeline;
pub mod train;
pub mod vote;

pub use error::{Error, Result};
