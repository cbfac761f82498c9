pub mod arap;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod skeleton;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
