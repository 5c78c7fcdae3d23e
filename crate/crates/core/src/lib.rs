//! Scene model and differentiable splatting pipeline for Gaussian-splat training.
//!
//! The crate covers the per-iteration math: projecting 3D Gaussians into
//! screen space, tile-based alpha compositing over 16x16 pixel blocks,
//! L1 + SSIM losses with analytic gradients, a per-group Adam optimizer with
//! batch-size-aware hyperparameter scaling, and adaptive densification.
//! Distribution of this work across workers lives in `grendel-engine`.
//!
//! All training math is f64. Every backward operation is hand-derived and
//! checked against central finite differences in the test suites.

pub mod adam;
pub mod camera;
pub mod cloud;
pub mod densify;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod project;
pub mod raster;
pub mod sh;

pub use adam::{AdamState, HyperParams, LrRule, MomentumRule, ScaledHyperParams};
pub use camera::CameraView;
pub use cloud::{CloudGrads, GaussianCloud, ParamGroup};
pub use densify::{DensifyConfig, DensifyStats};
pub use error::CoreError;
pub use image::ImageF;
pub use loss::{LossConfig, LossReport};
pub use project::{ProjectedGrads, ProjectedShard, ProjectionConfig};
pub use raster::{RasterConfig, RenderAux, TileZBuffer, BLOCK};

/// Numeric opacity activation shared by the cloud and the rasterizer.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]; input must lie in (0, 1).
pub fn inverse_sigmoid(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}
