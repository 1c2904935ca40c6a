//! Pinhole camera with an OpenCV-style frame: x right, y down, z forward.
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and its ray passes through
//! the pixel center.

use nalgebra::{Matrix3, Vector3};

use crate::error::{QgsError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Intrinsics for a horizontal field of view, principal point at the image center.
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub name: String,
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// A primary ray through a pixel center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelRay {
    pub origin: Vector3<f64>,
    /// Unit direction in world frame.
    pub dir: Vector3<f64>,
    /// Camera-frame z of the unit direction; ray depth times this is z-depth.
    pub z_scale: f64,
}

impl Camera {
    pub fn new(
        name: impl Into<String>,
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Self {
        Self {
            name: name.into(),
            intrinsics,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn look_at(
        name: impl Into<String>,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - eye).normalize();
        let mut down = -up + z * up.dot(&z);
        if down.norm() < 1e-9 {
            down = z.cross(&Vector3::new(1.0, 0.0, 0.0));
            if down.norm() < 1e-9 {
                down = z.cross(&Vector3::new(0.0, 1.0, 0.0));
            }
        }
        let y = down.normalize();
        let x = y.cross(&z);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(name, intrinsics, rotation, translation, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(QgsError::InvalidParameter(format!(
                "camera `{}` needs positive focal lengths",
                self.name
            )));
        }
        let dev = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(dev <= 1e-6) {
            return Err(QgsError::InvalidParameter(format!(
                "camera `{}` rotation is not orthonormal (deviation {dev:e})",
                self.name
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(QgsError::InvalidParameter(format!("camera `{}` has an empty image", self.name)));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    /// Continuous pixel coordinates and camera z of a world point.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera(p);
        if pc.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy, pc.z))
    }

    /// Ray through continuous pixel coordinates `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> PixelRay {
        let k = &self.intrinsics;
        let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0).normalize();
        PixelRay {
            origin: self.center(),
            dir: self.rotation.transpose() * d_cam,
            z_scale: d_cam.z,
        }
    }

    pub fn pixel_ray(&self, px: usize, py: usize) -> PixelRay {
        self.ray_through(px as f64 + 0.5, py as f64 + 0.5)
    }

    /// Camera-frame point at z-depth `depth` behind continuous pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth)
    }

    /// Row-major 4x4 world-to-camera matrix.
    pub fn world_to_camera_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_world_to_camera_matrix(
        name: impl Into<String>,
        intrinsics: Intrinsics,
        m: &[[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        let cam = Self::new(name, intrinsics, rotation, translation, width, height);
        cam.validate()?;
        Ok(cam)
    }

    /// Relative pose mapping this camera's frame into `other`'s frame:
    /// `x_other = R x_self + T`.
    pub fn relative_to(&self, other: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
        let r = other.rotation * self.rotation.transpose();
        let t = other.translation - r * self.translation;
        (r, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam() -> Camera {
        Camera::look_at(
            "c",
            Vector3::new(0.0, -4.0, 1.0),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            Intrinsics::from_fov(64, 48, 0.9),
            64,
            48,
        )
    }

    #[test]
    fn look_at_is_valid_and_centered() {
        let c = cam();
        c.validate().unwrap();
        assert_relative_eq!(c.center(), Vector3::new(0.0, -4.0, 1.0), epsilon = 1e-12);
        let (u, v, z) = c.project(&Vector3::zeros()).unwrap();
        assert_relative_eq!(u, 32.0, epsilon = 1e-12);
        assert_relative_eq!(v, 24.0, epsilon = 1e-12);
        assert_relative_eq!(z, 17f64.sqrt(), epsilon = 1e-12);
        // World up projects upward on screen (smaller v).
        let (_, v_up, _) = c.project(&Vector3::new(0.0, 0.0, 0.5)).unwrap();
        assert!(v_up < v);
    }

    #[test]
    fn ray_and_projection_agree() {
        let c = cam();
        let r = c.pixel_ray(10, 40);
        let p = r.origin + r.dir * 3.0;
        let (u, v, z) = c.project(&p).unwrap();
        assert_relative_eq!(u, 10.5, epsilon = 1e-10);
        assert_relative_eq!(v, 40.5, epsilon = 1e-10);
        assert_relative_eq!(z, 3.0 * r.z_scale, epsilon = 1e-12);
        let back = c.to_world(&c.backproject(u, v, z));
        assert_relative_eq!(back, p, epsilon = 1e-10);
    }

    #[test]
    fn matrix_roundtrip_and_validation() {
        let c = cam();
        let m = c.world_to_camera_matrix();
        let d = Camera::from_world_to_camera_matrix("c", c.intrinsics, &m, 64, 48).unwrap();
        assert_eq!(c, d);
        let mut bad = m;
        bad[0][0] = 2.0;
        assert!(Camera::from_world_to_camera_matrix("c", c.intrinsics, &bad, 64, 48).is_err());
    }

    #[test]
    fn relative_pose_maps_frames() {
        let a = cam();
        let b = Camera::look_at(
            "b",
            Vector3::new(3.0, -3.0, 1.5),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            a.intrinsics,
            64,
            48,
        );
        let (r, t) = a.relative_to(&b);
        let p = Vector3::new(0.3, 0.2, -0.1);
        assert_relative_eq!(r * a.to_camera(&p) + t, b.to_camera(&p), epsilon = 1e-12);
    }
}
