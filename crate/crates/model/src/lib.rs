pub mod asr;
pub mod encoders;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod probe;
pub mod trainer;

pub use error::{Error, Result};
