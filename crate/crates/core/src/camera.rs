//! Pinhole cameras (OpenCV axes: x right, y down, z forward).

use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera rotation.
    pub rotation: Mat3,
    /// Camera centre in world coordinates.
    pub center: Vec3,
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Camera {
    /// Validates intrinsics and pose orthonormality.
    pub fn validate(&self, tolerance: f64) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Pose {
                id: self.id,
                message: format!("focal lengths must be positive ({}, {})", self.fx, self.fy),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Pose {
                id: self.id,
                message: "zero image size".into(),
            });
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if !err.is_finite() || err > tolerance {
            return Err(Error::Pose {
                id: self.id,
                message: format!("rotation is not orthonormal (deviation {err:.3e})"),
            });
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::Pose {
                id: self.id,
                message: "rotation has negative determinant".into(),
            });
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::Pose {
                id: self.id,
                message: "non-finite camera centre".into(),
            });
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with a square image and the given
    /// horizontal field of view in radians.
    pub fn look_at(id: usize, eye: Vec3, target: Vec3, up: Vec3, size: usize, fov_x: f64) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vec3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        let f = 0.5 * size as f64 / (0.5 * fov_x).tan();
        Camera {
            id,
            fx: f,
            fy: f,
            cx: 0.5 * size as f64,
            cy: 0.5 * size as f64,
            width: size,
            height: size,
            rotation,
            center: eye,
        }
    }

    /// Ray through the continuous pixel coordinate `(u, v)`; pixel centres sit
    /// at half-integers.
    pub fn ray(&self, u: f64, v: f64) -> Ray {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray {
            origin: self.center,
            dir: (self.rotation * d_cam).normalize(),
        }
    }

    pub fn pixel_ray(&self, px: usize, py: usize) -> Ray {
        self.ray(px as f64 + 0.5, py as f64 + 0.5)
    }

    /// Projects a world point; returns `(u, v, depth)` with depth along the
    /// optical axis, or `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let pc = self.rotation.transpose() * (p - self.center);
        if pc.z <= 1e-9 {
            return None;
        }
        Some((
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
            pc.z,
        ))
    }

    /// Same camera with the image resolution divided by `divisor`.
    pub fn downscaled(&self, divisor: usize) -> Camera {
        if divisor <= 1 {
            return self.clone();
        }
        let s = 1.0 / divisor as f64;
        Camera {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width / divisor).max(1),
            height: (self.height / divisor).max(1),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_projects_target_to_center() {
        let cam = Camera::look_at(
            0,
            Vec3::new(3.0, 1.0, -2.0),
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, 1.0),
            64,
            0.8,
        );
        cam.validate(1e-9).unwrap();
        let (u, v, d) = cam.project(&Vec3::zeros()).unwrap();
        assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9);
        assert!((d - 14f64.sqrt()).abs() < 1e-9);
        let ray = cam.ray(u, v);
        assert!((ray.dir - (-cam.center).normalize()).norm() < 1e-12);
    }

    #[test]
    fn rejects_skewed_rotation() {
        let mut cam = Camera::look_at(3, Vec3::new(0.0, -3.0, 0.0), Vec3::zeros(), Vec3::z(), 8, 1.0);
        cam.rotation[(0, 1)] += 0.01;
        assert!(matches!(cam.validate(1e-4), Err(Error::Pose { id: 3, .. })));
    }

    #[test]
    fn ray_and_projection_roundtrip() {
        let cam = Camera::look_at(0, Vec3::new(0.0, -4.0, 1.0), Vec3::zeros(), Vec3::z(), 32, 0.9);
        let ray = cam.ray(7.25, 20.5);
        let p = ray.origin + ray.dir * 3.3;
        let (u, v, _) = cam.project(&p).unwrap();
        assert!((u - 7.25).abs() < 1e-9 && (v - 20.5).abs() < 1e-9);
    }
}
