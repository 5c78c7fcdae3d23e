//! JSON scene manifests: posed cameras, ground-truth image paths, the
//! initialization point cloud, and the train/test split.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use grendel_core::camera::CameraView;
use grendel_core::densify::scene_extent_from_centers;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::engine::SceneData;
use crate::error::EngineError;
use crate::io::{load_image, ppm};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, 9 row-major entries.
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    /// World-to-camera translation.
    pub t: [f64; 3],
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestJson {
    pub cameras: Vec<CameraJson>,
    /// Initialization point cloud, relative to the manifest directory.
    pub points: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_ids: Option<Vec<u32>>,
}

/// A validated scene description.
#[derive(Debug, Clone)]
pub struct SceneManifest {
    pub cameras: Vec<CameraView>,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub points_path: Option<PathBuf>,
    pub base_dir: PathBuf,
}

/// Loads and validates a manifest: image files must exist with the declared
/// dimensions, rotations must be orthonormal, ids unique. Without an
/// explicit split, every 8th camera (by list position) is held out for
/// testing; a single-camera scene trains on everything with a warning.
pub fn load_manifest(path: &Path) -> Result<SceneManifest, EngineError> {
    let text = std::fs::read_to_string(path).map_err(|e| EngineError::io(path, e))?;
    let parsed: ManifestJson = serde_json::from_str(&text)
        .map_err(|e| EngineError::Manifest(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    if parsed.cameras.is_empty() {
        return Err(EngineError::Manifest(format!(
            "{}: no cameras",
            path.display()
        )));
    }

    let mut cameras = Vec::with_capacity(parsed.cameras.len());
    let mut seen = std::collections::HashSet::new();
    for cam in &parsed.cameras {
        if !seen.insert(cam.id) {
            return Err(EngineError::Manifest(format!(
                "duplicate camera id {}",
                cam.id
            )));
        }
        let image_path = base_dir.join(&cam.image);
        let (w, h) = image_dims(&image_path)?;
        if (w, h) != (cam.width, cam.height) {
            return Err(EngineError::Manifest(format!(
                "camera {}: image {} is {w}x{h}, manifest declares {}x{}",
                cam.id,
                image_path.display(),
                cam.width,
                cam.height
            )));
        }
        let r = &cam.rotation;
        let view = CameraView {
            id: cam.id,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation: Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            translation: Vector3::new(cam.t[0], cam.t[1], cam.t[2]),
            image_path: image_path.to_string_lossy().into_owned(),
        };
        view.validate()?;
        cameras.push(view);
    }

    let (train_ids, test_ids) = match (&parsed.train_ids, &parsed.test_ids) {
        (Some(train), Some(test)) => {
            if train.iter().any(|id| test.contains(id)) {
                return Err(EngineError::Manifest(
                    "train and test ids overlap".into(),
                ));
            }
            (train.clone(), test.clone())
        }
        (None, Some(test)) => {
            let train = cameras
                .iter()
                .map(|c| c.id)
                .filter(|id| !test.contains(id))
                .collect();
            (train, test.clone())
        }
        _ => {
            // Default split: hold out every 8th camera by list position.
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (k, cam) in cameras.iter().enumerate() {
                if k % 8 == 0 && cameras.len() > 1 {
                    test.push(cam.id);
                } else {
                    train.push(cam.id);
                }
            }
            if cameras.len() == 1 {
                log::warn!("single-camera scene: test split is empty");
            }
            (train, test)
        }
    };
    if train_ids.is_empty() {
        return Err(EngineError::Manifest("empty training split".into()));
    }

    Ok(SceneManifest {
        cameras,
        train_ids,
        test_ids,
        points_path: parsed.points.as_ref().map(|p| base_dir.join(p)),
        base_dir,
    })
}

fn image_dims(path: &Path) -> Result<(u32, u32), EngineError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => ppm::read_dims(path),
        _ => load_image(path).map(|img| (img.width, img.height)),
    }
}

pub fn save_manifest(manifest: &ManifestJson, path: &Path) -> Result<(), EngineError> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| EngineError::Manifest(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| EngineError::io(path, e))
}

/// Loads ground-truth images and assembles the engine's scene description.
pub fn to_scene_data(manifest: &SceneManifest) -> Result<SceneData, EngineError> {
    let mut targets = Vec::with_capacity(manifest.cameras.len());
    for cam in &manifest.cameras {
        targets.push(Arc::new(load_image(Path::new(&cam.image_path))?));
    }
    let index_of = |id: u32| -> Result<usize, EngineError> {
        manifest
            .cameras
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| EngineError::Manifest(format!("unknown camera id {id} in split")))
    };
    let train = manifest
        .train_ids
        .iter()
        .map(|&id| index_of(id))
        .collect::<Result<Vec<_>, _>>()?;
    let test = manifest
        .test_ids
        .iter()
        .map(|&id| index_of(id))
        .collect::<Result<Vec<_>, _>>()?;
    let centers: Vec<[f64; 3]> = manifest
        .cameras
        .iter()
        .map(|c| {
            let p = c.center();
            [p.x, p.y, p.z]
        })
        .collect();
    Ok(SceneData {
        cameras: manifest.cameras.clone(),
        targets,
        train,
        test,
        extent: scene_extent_from_centers(&centers),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use grendel_core::image::ImageF;
    use crate::io::ppm::write_ppm;

    fn write_scene(dir: &Path, n: usize, rotation: [f64; 9]) -> PathBuf {
        let mut cameras = Vec::new();
        for id in 0..n as u32 {
            let name = format!("img_{id}.ppm");
            write_ppm(&ImageF::zeros(32, 24), &dir.join(&name)).unwrap();
            cameras.push(CameraJson {
                id,
                width: 32,
                height: 24,
                fx: 40.0,
                fy: 40.0,
                cx: 16.0,
                cy: 12.0,
                rotation,
                t: [0.0, 0.0, 0.0],
                image: name,
            });
        }
        let path = dir.join("manifest.json");
        save_manifest(
            &ManifestJson {
                cameras,
                points: None,
                train_ids: None,
                test_ids: None,
            },
            &path,
        )
        .unwrap();
        path
    }

    const IDENTITY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

    #[test]
    fn default_split_holds_out_every_eighth() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), 8, IDENTITY);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.test_ids, vec![0]);
        assert_eq!(m.train_ids.len(), 7);
    }

    #[test]
    fn single_camera_scene_has_empty_test_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), 1, IDENTITY);
        let m = load_manifest(&path).unwrap();
        assert!(m.test_ids.is_empty());
        assert_eq!(m.train_ids, vec![0]);
    }

    #[test]
    fn skewed_rotation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rot = IDENTITY;
        rot[1] = 1e-2;
        let path = write_scene(dir.path(), 2, rot);
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), 2, IDENTITY);
        // Overwrite one image with the wrong size.
        write_ppm(&ImageF::zeros(16, 16), &dir.path().join("img_1.ppm")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("declares"));
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), 2, IDENTITY);
        std::fs::remove_file(dir.path().join("img_0.ppm")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("img_0.ppm"));
    }
}
