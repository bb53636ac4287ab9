pub mod dataio;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pointnet;
pub mod raster;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
