//! Surface normals and Gaussian curvature of the paraboloid sheet.

use nalgebra::{Matrix3, Vector3};

use crate::primitive::{LocalPoint, SurfaceShape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceFrame {
    /// Unit normal in world frame, oriented toward the viewer.
    pub normal: Vector3<f64>,
    pub curvature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Unnormalized local normal `(2 l1 x, 2 l2 y, -1)`; `(0, 0, -1)` when flat.
///
/// This is the implicit-function gradient scaled by `s3`, so its direction
/// may be flipped relative to that gradient; callers orient it anyway.
#[inline]
pub fn local_normal_unnormalized(shape: &SurfaceShape, x: f64, y: f64) -> Vector3<f64> {
    Vector3::new(2.0 * shape.lambda[0] * x, 2.0 * shape.lambda[1] * y, -1.0)
}

/// World-frame unit normal at an on-surface point, flipped to face against
/// `view_dir` (the world-frame ray direction).
pub fn normal_at(
    shape: &SurfaceShape,
    rotation: &Matrix3<f64>,
    p: &LocalPoint,
    view_dir: &Vector3<f64>,
) -> Vector3<f64> {
    let n = rotation * local_normal_unnormalized(shape, p.x, p.y).normalize();
    if n.dot(view_dir) > 0.0 {
        -n
    } else {
        n
    }
}

/// Gaussian curvature `4 l1 l2 / (1 + 4 l1^2 x^2 + 4 l2^2 y^2)^2`; zero when flat.
#[inline]
pub fn curvature_at(shape: &SurfaceShape, p: &LocalPoint) -> f64 {
    if shape.planar {
        return 0.0;
    }
    let [l1, l2] = shape.lambda;
    let e = 1.0 + 4.0 * l1 * l1 * p.x * p.x + 4.0 * l2 * l2 * p.y * p.y;
    4.0 * l1 * l2 / (e * e)
}

pub fn surface_frame(
    shape: &SurfaceShape,
    rotation: &Matrix3<f64>,
    p: &LocalPoint,
    view_dir: &Vector3<f64>,
) -> SurfaceFrame {
    SurfaceFrame {
        normal: normal_at(shape, rotation, p, view_dir),
        curvature: curvature_at(shape, p),
        lambda1: shape.lambda[0],
        lambda2: shape.lambda[1],
    }
}
