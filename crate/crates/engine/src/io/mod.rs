//! Dataset ingestion (manifests, images, point clouds), checkpoint
//! persistence, and synthetic scene generation.

pub mod manifest;
pub mod ply;
pub mod ppm;
pub mod state;
pub mod synth;

use std::path::Path;

use grendel_core::image::ImageF;

use crate::error::EngineError;

/// Loads an image by extension: PPM always, PNG behind the `png` feature.
pub fn load_image(path: &Path) -> Result<ImageF, EngineError> {
    match extension(path) {
        Some("ppm") => ppm::read_ppm(path),
        #[cfg(feature = "png")]
        Some("png") => png_io::read_png(path),
        other => Err(EngineError::Image(format!(
            "unsupported image extension {:?} for {}",
            other,
            path.display()
        ))),
    }
}

/// Saves an image by extension; colors are clamped to [0, 1] and quantized
/// to 8 bits.
pub fn save_image(img: &ImageF, path: &Path) -> Result<(), EngineError> {
    match extension(path) {
        Some("ppm") => ppm::write_ppm(img, path),
        #[cfg(feature = "png")]
        Some("png") => png_io::write_png(img, path),
        other => Err(EngineError::Image(format!(
            "unsupported image extension {:?} for {}",
            other,
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

#[cfg(feature = "png")]
mod png_io {
    use super::*;

    pub fn read_png(path: &Path) -> Result<ImageF, EngineError> {
        let img = image::open(path)
            .map_err(|e| EngineError::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut out = ImageF::zeros(w, h);
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                out.data[i][c] = p.0[c] as f64 / 255.0;
            }
        }
        Ok(out)
    }

    pub fn write_png(img: &ImageF, path: &Path) -> Result<(), EngineError> {
        let mut buf = image::RgbImage::new(img.width, img.height);
        for (i, p) in buf.pixels_mut().enumerate() {
            for c in 0..3 {
                p.0[c] = (img.data[i][c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(path)
            .map_err(|e| EngineError::Image(format!("{}: {e}", path.display())))
    }
}
