//! Gaussian splatting with joint surface reconstruction and open-vocabulary segmentation.

pub mod camera;
pub mod container;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod priors;
pub mod query;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod spatial;
pub mod ssim;
pub mod synthetic;
pub mod trainer;

pub use camera::Camera;
pub use error::{GlsError, Result};
pub use image::{Image, LabelMap, Mask};
pub use scene::{GaussianPrimitive, Scene};
