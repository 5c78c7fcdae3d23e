//! Synthetic scene generation: a random ground-truth gaussian cloud,
//! a camera rig, and ground-truth images rendered by this repository's own
//! forward renderer. Everything is a pure function of the seed, so the same
//! spec reproduces identical datasets byte for byte.

use std::path::Path;
use std::sync::Arc;

use grendel_core::camera::CameraView;
use grendel_core::cloud::{GaussianCloud, InitPoint, SH_PER_GAUSSIAN};
use grendel_core::densify::scene_extent_from_centers;
use grendel_core::project::ProjectionConfig;
use grendel_core::raster::RasterConfig;
use grendel_core::sh::{SH_COEFFS, Y00};
use grendel_core::inverse_sigmoid;
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::SceneData;
use crate::error::EngineError;
use crate::io::manifest::{save_manifest, CameraJson, ManifestJson};
use crate::io::{ply, ppm};
use crate::render::render_image;
use crate::rng::{derive, tag};

/// Camera arrangement of the synthetic rig.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rig {
    /// Cameras on a jittered orbit looking at the cluster center.
    Orbit,
    /// Nearly coincident cameras looking down +z; keeps image-space layout
    /// (such as a left-heavy cluster) the same in every view.
    Facing,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// World radius of the gaussian cluster.
    pub extent: f64,
    pub rig: Rig,
    /// Fraction of gaussians placed in the camera-space left half
    /// (0.5 is balanced; 0.9 drives the load-balancing benchmarks).
    pub left_fraction: f64,
    pub opacity_range: (f64, f64),
    /// Scale range relative to the extent.
    pub scale_range: (f64, f64),
    /// Fraction of ground-truth gaussians exported as initialization points.
    pub init_points_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 300,
            views: 16,
            width: 64,
            height: 64,
            seed: 1,
            extent: 1.0,
            rig: Rig::Orbit,
            left_fraction: 0.5,
            opacity_range: (0.5, 0.9),
            scale_range: (0.03, 0.09),
            init_points_fraction: 1.0,
        }
    }
}

/// A generated scene: ground truth model, cameras with rendered targets,
/// and the initialization points derived from the ground truth.
pub struct SyntheticScene {
    pub gt_cloud: GaussianCloud,
    pub scene: SceneData,
    pub init_points: Vec<InitPoint>,
}

fn make_cameras(spec: &SyntheticSpec) -> Vec<CameraView> {
    let fx = spec.width as f64 * 1.25;
    let fy = fx;
    let mut cams = Vec::with_capacity(spec.views);
    match spec.rig {
        Rig::Orbit => {
            let radius = 2.5 * spec.extent;
            for k in 0..spec.views {
                let theta = k as f64 / spec.views as f64 * std::f64::consts::TAU;
                // Alternate elevation bands for vertical coverage.
                let phi: f64 = match k % 3 {
                    0 => 0.0,
                    1 => 0.35,
                    _ => -0.35,
                };
                let eye = Vector3::new(
                    radius * theta.cos() * phi.cos(),
                    radius * phi.sin(),
                    radius * theta.sin() * phi.cos(),
                );
                cams.push(CameraView::look_at(
                    k as u32,
                    spec.width,
                    spec.height,
                    fx,
                    fy,
                    eye,
                    Vector3::zeros(),
                    Vector3::new(0.0, 1.0, 0.0),
                ));
            }
        }
        Rig::Facing => {
            // Cluster center sits at z = 2.5 * extent in front of z = 0.
            for k in 0..spec.views {
                let mut cam =
                    CameraView::facing_z(k as u32, spec.width, spec.height, fx, fy);
                let jitter = 0.03 * spec.extent;
                let angle = k as f64 / spec.views.max(1) as f64 * std::f64::consts::TAU;
                cam.translation =
                    Vector3::new(jitter * angle.cos(), jitter * angle.sin(), 0.0);
                cams.push(cam);
            }
        }
    }
    cams
}

fn make_cloud(spec: &SyntheticSpec, cluster_center: Vector3<f64>) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, tag::SYNTH, spec.count as u64, 0));
    let mut cloud = GaussianCloud::default();
    for i in 0..spec.count {
        // Rejection-free ball sample, then force the configured fraction
        // into the left half (negative x).
        let mut p: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-9);
        let r = spec.extent * rng.random_range(0.05f64..1.0).cbrt();
        for v in &mut p {
            *v = *v / norm * r;
        }
        let want_left = (i as f64 + 0.5) / spec.count as f64 <= spec.left_fraction;
        if want_left != (p[0] < 0.0) {
            p[0] = -p[0];
        }
        cloud.positions.push([
            cluster_center.x + p[0],
            cluster_center.y + p[1],
            cluster_center.z + p[2],
        ]);
        let s = spec.extent * rng.random_range(spec.scale_range.0..spec.scale_range.1);
        cloud.log_scales.push([
            (s * rng.random_range(0.7..1.4)).ln(),
            (s * rng.random_range(0.7..1.4)).ln(),
            (s * rng.random_range(0.7..1.4)).ln(),
        ]);
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        cloud
            .rotations
            .push([q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn]);
        cloud.opacity_logits.push(inverse_sigmoid(
            rng.random_range(spec.opacity_range.0..spec.opacity_range.1),
        ));
        let mut sh = [0.0; SH_PER_GAUSSIAN];
        for c in 0..3 {
            let color = rng.random_range(0.15..0.95);
            sh[c * SH_COEFFS] = (color - 0.5) / Y00;
        }
        cloud.sh_coeffs.push(sh);
    }
    cloud
}

/// Generates the scene in memory. Ground-truth images come from
/// [`render_image`] with the given configs over a black background.
pub fn generate_synthetic_scene(
    spec: &SyntheticSpec,
    proj: &ProjectionConfig,
    raster: &RasterConfig,
) -> Result<SyntheticScene, EngineError> {
    if spec.count == 0 || spec.views == 0 {
        return Err(EngineError::Config(
            "synthetic spec needs count >= 1 and views >= 1".into(),
        ));
    }
    let cameras = make_cameras(spec);
    let cluster_center = match spec.rig {
        Rig::Orbit => Vector3::zeros(),
        Rig::Facing => Vector3::new(0.0, 0.0, 2.5 * spec.extent),
    };
    let gt_cloud = make_cloud(spec, cluster_center);
    let gids: Vec<u64> = (0..gt_cloud.len() as u64).collect();
    let mut targets = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        targets.push(Arc::new(render_image(
            &gt_cloud,
            &gids,
            cam,
            [0.0; 3],
            proj,
            raster,
        )?));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..cameras.len() {
        if k % 8 == 0 && cameras.len() > 1 {
            test.push(k);
        } else {
            train.push(k);
        }
    }
    let centers: Vec<[f64; 3]> = cameras
        .iter()
        .map(|c| {
            let p = c.center();
            [p.x, p.y, p.z]
        })
        .collect();
    let scene = SceneData {
        cameras,
        targets,
        train,
        test,
        extent: scene_extent_from_centers(&centers),
    };

    let mut init_points: Vec<InitPoint> = (0..gt_cloud.len())
        .map(|i| InitPoint {
            position: gt_cloud.positions[i],
            rgb: Some(std::array::from_fn(|c| {
                (0.5 + Y00 * gt_cloud.sh_coeffs[i][c * SH_COEFFS]).clamp(0.0, 1.0)
            })),
        })
        .collect();
    if spec.init_points_fraction < 1.0 {
        let keep = ((gt_cloud.len() as f64 * spec.init_points_fraction).round() as usize).max(1);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive(spec.seed, tag::SYNTH, keep as u64, 1));
        init_points.shuffle(&mut rng);
        init_points.truncate(keep);
    }

    Ok(SyntheticScene {
        gt_cloud,
        scene,
        init_points,
    })
}

/// Writes a generated scene as an on-disk dataset: `manifest.json`,
/// `images/view_*.ppm`, and `points.ply`.
pub fn materialize_dataset(
    synth: &SyntheticScene,
    dir: &Path,
) -> Result<std::path::PathBuf, EngineError> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| EngineError::io(&images_dir, e))?;
    let mut cameras = Vec::new();
    for (k, cam) in synth.scene.cameras.iter().enumerate() {
        let name = format!("images/view_{:03}.ppm", cam.id);
        ppm::write_ppm(&synth.scene.targets[k], &dir.join(&name))?;
        let r = cam.rotation;
        cameras.push(CameraJson {
            id: cam.id,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
            image: name,
        });
    }
    ply::write_points(&synth.init_points, &dir.join("points.ply"))?;
    let manifest_path = dir.join("manifest.json");
    save_manifest(
        &ManifestJson {
            cameras,
            points: Some("points.ply".into()),
            train_ids: None,
            test_ids: None,
        },
        &manifest_path,
    )?;
    Ok(manifest_path)
}

/// A gaussian's image-space heaviness for the skew tests: true when its
/// ground-truth projection in view 0 lands in the left image half.
pub fn projects_left(scene: &SyntheticScene, proj: &ProjectionConfig, i: usize) -> bool {
    let cam = &scene.scene.cameras[0];
    let shard = grendel_core::project::transform_gaussians(&synth_slice(&scene.gt_cloud, i), cam, proj)
        .expect("finite gt cloud");
    shard.visible[0] && shard.mean2d[0][0] < cam.width as f64 / 2.0
}

fn synth_slice(cloud: &GaussianCloud, i: usize) -> GaussianCloud {
    let mut one = GaussianCloud::default();
    one.push_from(cloud, i);
    one
}
