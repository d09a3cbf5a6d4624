//! Pinhole cameras in the OpenCV convention: +x right, +y down, +z forward.
//!
//! Pixel `(u, v)` has its center at image coordinate `(u, v)`, so a point on the optical
//! axis projects exactly onto `(cx, cy)`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{GlsError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Rotation part of the world-to-camera transform.
    pub rotation: Matrix3<f64>,
    /// Translation part of the world-to-camera transform.
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GlsError::InvalidParameter(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(GlsError::InvalidParameter(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GlsError::InvalidParameter("camera has zero-sized image".into()));
        }
        let should_be_identity = self.rotation * self.rotation.transpose();
        if (should_be_identity - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(GlsError::InvalidParameter(
                "world-to-camera rotation is not orthonormal".into(),
            ));
        }
        Ok(())
    }

    /// Camera looking from `eye` toward `target`; `up` is the world up direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(GlsError::Config("camera eye coincides with its target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(GlsError::Config(
                "camera view direction is parallel to the up vector".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        Ok(Camera {
            fx,
            fy,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
            rotation,
            translation,
            near,
            far,
        })
    }

    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Image coordinates of a camera-frame point (requires `p.z > 0`).
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Unit camera-frame viewing direction through image coordinate `(u, v)`.
    #[inline]
    pub fn ray_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }

    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Same pose and intrinsics with a different image size; the principal point and focal
    /// lengths are rescaled.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            ..self.clone()
        }
    }
}

/// On-disk camera record: row-major 4x4 world-to-camera plus intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: [f64; 16],
    pub near: f64,
    pub far: f64,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let m = c.world_to_camera();
        let mut world_to_camera = [0.0; 16];
        for r in 0..4 {
            for col in 0..4 {
                world_to_camera[r * 4 + col] = m[(r, col)];
            }
        }
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            world_to_camera,
            near: c.near,
            far: c.far,
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = GlsError;

    fn try_from(r: &CameraRecord) -> Result<Self> {
        let m = &r.world_to_camera;
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        let camera = Camera {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
            rotation,
            translation,
            near: r.near,
            far: r.far,
        };
        camera.validate()?;
        Ok(camera)
    }
}
