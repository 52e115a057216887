//! Pinhole camera and rays.
//!
//! Right-handed convention: in its local frame the camera looks down `-z`,
//! `+x` is right and `+y` is up. Pixel rows grow downward. This is the
//! layout of NeRF-Blender `transform_matrix` entries.

use crate::error::{Error, Result};
use crate::math::{Mat3, UnitVec3, Vec3};

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: UnitVec3,
    pub t_min: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: UnitVec3) -> Self {
        Ray { origin, dir, t_min: 0.0 }
    }

    pub fn with_t_min(origin: Vec3, dir: UnitVec3, t_min: f64) -> Self {
        debug_assert!(t_min.is_finite() && t_min >= 0.0);
        Ray { origin, dir, t_min }
    }

    #[inline]
    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.dir.get() * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation.
    pub rotation: Mat3,
    /// Camera center in world space.
    pub translation: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        for (name, v) in [("fx", fx), ("fy", fy), ("cx", cx), ("cy", cy)] {
            if !v.is_finite() {
                return Err(Error::InvalidCamera(format!("{name} is not finite")));
            }
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        if !translation.is_finite() {
            return Err(Error::InvalidCamera("translation is not finite".into()));
        }
        let err = rotation.orthonormality_error();
        if !(err <= 1e-6) || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "rotation not orthonormal (err {err:e})"
            )));
        }
        Ok(Camera { width, height, fx, fy, cx, cy, rotation, translation })
    }

    /// Camera at `eye` looking at `target`, with horizontal field of view
    /// `fov_x` in radians and the principal point at the image center.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_x: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let back = UnitVec3::new(eye - target)?;
        let right = UnitVec3::new(up.cross(*back))
            .map_err(|_| Error::InvalidCamera("up is parallel to view direction".into()))?;
        let true_up = back.cross(*right);
        let rotation = Mat3::from_cols(*right, true_up, *back);
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Camera::new(width, height, f, f, width as f64 * 0.5, height as f64 * 0.5, rotation, eye)
    }

    /// Builds a camera from a NeRF-Blender 4x4 camera-to-world matrix and
    /// `camera_angle_x`.
    pub fn from_nerf(matrix: &[[f64; 4]; 4], camera_angle_x: f64, width: usize, height: usize) -> Result<Self> {
        let rotation = Mat3::from_rows([
            [matrix[0][0], matrix[0][1], matrix[0][2]],
            [matrix[1][0], matrix[1][1], matrix[1][2]],
            [matrix[2][0], matrix[2][1], matrix[2][2]],
        ]);
        let translation = Vec3::new(matrix[0][3], matrix[1][3], matrix[2][3]);
        if !(camera_angle_x.is_finite() && camera_angle_x > 0.0) {
            return Err(Error::InvalidCamera("camera_angle_x must be positive".into()));
        }
        let f = 0.5 * width as f64 / (0.5 * camera_angle_x).tan();
        Camera::new(width, height, f, f, width as f64 * 0.5, height as f64 * 0.5, rotation, translation)
    }

    pub fn to_nerf_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation.rows;
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn camera_angle_x(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.fx).atan()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Ray through sub-pixel position `(px, py)`; pixel centers sit at
    /// half-integer coordinates.
    pub fn ray_for_pixel(&self, px: f64, py: f64) -> Ray {
        let local = Vec3::new((px - self.cx) / self.fx, -(py - self.cy) / self.fy, -1.0);
        let world = self.rotation.mul_vec(local);
        let len = world.length();
        Ray::new(self.translation, UnitVec3::new_unchecked(world / len))
    }

    /// Ray through the center of pixel `(i, j)` (column, row).
    pub fn ray_for_pixel_center(&self, i: usize, j: usize) -> Ray {
        self.ray_for_pixel(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// Projects a world point to sub-pixel coordinates; `None` behind the
    /// camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let local = self.rotation.transpose().mul_vec(p - self.translation);
        if local.z >= 0.0 {
            return None;
        }
        let depth = -local.z;
        Some((
            self.cx + self.fx * local.x / depth,
            self.cy - self.fy * local.y / depth,
        ))
    }
}
