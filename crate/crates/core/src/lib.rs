//! Stylized novel-view synthesis from a single image and depth raster.

pub mod camera;
pub mod eval;
pub mod error;
pub mod image;
pub mod model;
pub mod pipeline;
pub mod pointcloud;
pub mod render;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
