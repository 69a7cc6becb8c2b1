pub mod composer;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod morphable;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod tensor;
pub mod tracker;
pub mod training;
pub mod wavelet;
pub mod windowing;

pub use error::{Error, Result};
