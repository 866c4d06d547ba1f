//! Differentiable Gaussian splatting and fixer-guided scene enhancement.

pub mod enhance;
pub mod evalx;
pub mod fixer;
pub mod grad;
pub mod image;
pub mod loss;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod sceneio;
pub mod synth;
