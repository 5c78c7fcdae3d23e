use nalgebra::{Matrix3, Vector3};

use crate::error::CoreError;

/// A posed pinhole camera. `rotation`/`translation` map world points into
/// camera space: `p_cam = R * p_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub image_path: String,
}

impl CameraView {
    /// Validates dimensions and rotation orthonormality (RᵀR = I within 1e-6).
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.width == 0 || self.height == 0 {
            return Err(CoreError::InvalidCamera(format!(
                "camera {}: zero image dimension",
                self.id
            )));
        }
        if !(self.fx.is_finite() && self.fy.is_finite() && self.fx > 0.0 && self.fy > 0.0) {
            return Err(CoreError::InvalidCamera(format!(
                "camera {}: focal lengths must be positive",
                self.id
            )));
        }
        let dev = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if dev > 1e-6 {
            return Err(CoreError::NonOrthonormalRotation { deviation: dev });
        }
        Ok(())
    }

    /// Camera position in world coordinates: `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// A camera looking down +z from the world origin, principal point at the
    /// image center. Convenient for synthetic scenes and unit tests.
    pub fn facing_z(id: u32, width: u32, height: u32, fx: f64, fy: f64) -> Self {
        CameraView {
            id,
            width,
            height,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            image_path: String::new(),
        }
    }

    /// A camera at `eye` looking at `target` with `up` as the vertical hint.
    pub fn look_at(
        id: u32,
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Self {
        // Camera convention: +x right, +y down, +z forward.
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        CameraView {
            id,
            width,
            height,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
            image_path: String::new(),
        }
    }
}
