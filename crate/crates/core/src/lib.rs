pub mod aff;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod event;
pub mod hic;
pub mod model;
pub mod numerical;
pub mod pipeline;
pub mod plot;
pub mod spectral;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
