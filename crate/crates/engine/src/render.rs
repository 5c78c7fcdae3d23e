//! Monolithic whole-image rendering, used for ground-truth synthesis,
//! evaluation, and the render command. The distributed path with one worker
//! reproduces this bit for bit (same block traversal, same tile lists).

use grendel_core::camera::CameraView;
use grendel_core::cloud::GaussianCloud;
use grendel_core::image::ImageF;
use grendel_core::project::{transform_gaussians, ProjectionConfig};
use grendel_core::raster::{build_tile_lists, render_forward, BlockMask, RasterConfig, RenderAux};

use crate::error::EngineError;

pub fn render_image(
    cloud: &GaussianCloud,
    gids: &[u64],
    view: &CameraView,
    background: [f64; 3],
    proj: &ProjectionConfig,
    raster: &RasterConfig,
) -> Result<ImageF, EngineError> {
    let shard = transform_gaussians(cloud, view, proj)?;
    let mask = BlockMask::all(view.width, view.height);
    let zbuf = build_tile_lists(&shard, gids, &mask);
    let mut img = ImageF::zeros(view.width, view.height);
    let mut aux = RenderAux::new(view.width, view.height);
    render_forward(&zbuf, &shard, &mask, background, raster, &mut img, &mut aux);
    Ok(img)
}
