//! The paraboloid surfel primitive, its parameter activations and the
//! rigid maps between world space and a primitive's local frame.
//!
//! In local coordinates a primitive is the sheet
//!
//! ```text
//! z = s3 * (sign(s1) x^2 / s1^2 + sign(s2) y^2 / s2^2) = l1 x^2 + l2 y^2
//! ```
//!
//! where `l_k = sign(s_k) s3 / s_k^2` are the principal coefficients. All
//! downstream code works with the `l_k` form, which stays finite as `s3`
//! goes to zero (the flat disk limit).

use nalgebra::{Matrix3, Vector3};

use crate::error::{QgsError, Result};
use crate::sh::MAX_SH_COEFFS;

/// Floor on `|s1|`, `|s2|`.
pub const S_MIN: f64 = 1e-4;
/// Below this `|s3|` a primitive is treated as a flat disk.
pub const S3_FLAT: f64 = 1e-6;

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn sign_pos(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadricPrimitive {
    pub center: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`. Normalized on use, so it need not be unit.
    pub rotation: [f64; 4],
    pub raw_scales: Vector3<f64>,
    pub raw_signs: Vector3<f64>,
    pub raw_opacity: f64,
    /// Spherical-harmonic coefficients, `sh[k][channel]`. Only the first
    /// `(degree + 1)^2` rows are used.
    pub sh: [[f64; 3]; MAX_SH_COEFFS],
}

impl QuadricPrimitive {
    pub fn new(center: Vector3<f64>) -> Self {
        Self {
            center,
            rotation: [1.0, 0.0, 0.0, 0.0],
            raw_scales: Vector3::zeros(),
            raw_signs: Vector3::new(3.0, 3.0, 3.0),
            raw_opacity: 0.0,
            sh: [[0.0; 3]; MAX_SH_COEFFS],
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.raw_opacity)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(normalize_quat(self.rotation))
    }

    pub fn scales(&self) -> Result<SignedScales> {
        activate(&self.raw_scales, &self.raw_signs)
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.raw_scales.iter().all(|v| v.is_finite())
            && self.raw_signs.iter().all(|v| v.is_finite())
            && self.raw_opacity.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }
}

/// Number of scalar parameters per primitive in the flat layout used by
/// [`QuadricPrimitive::to_params`]: center, quaternion, raw scales, raw
/// signs, raw opacity, then SH coefficients `sh[k][c]` at `k * 3 + c`.
pub const NUM_PARAMS: usize = 62;
pub const PARAM_CENTER: usize = 0;
pub const PARAM_ROTATION: usize = 3;
pub const PARAM_RAW_SCALES: usize = 7;
pub const PARAM_RAW_SIGNS: usize = 10;
pub const PARAM_RAW_OPACITY: usize = 13;
pub const PARAM_SH: usize = 14;

impl QuadricPrimitive {
    pub fn to_params(&self) -> [f64; NUM_PARAMS] {
        let mut p = [0.0; NUM_PARAMS];
        p[0..3].copy_from_slice(self.center.as_slice());
        p[3..7].copy_from_slice(&self.rotation);
        p[7..10].copy_from_slice(self.raw_scales.as_slice());
        p[10..13].copy_from_slice(self.raw_signs.as_slice());
        p[13] = self.raw_opacity;
        for (k, row) in self.sh.iter().enumerate() {
            p[PARAM_SH + 3 * k..PARAM_SH + 3 * k + 3].copy_from_slice(row);
        }
        p
    }

    pub fn from_params(p: &[f64; NUM_PARAMS]) -> Self {
        let mut sh = [[0.0; 3]; MAX_SH_COEFFS];
        for (k, row) in sh.iter_mut().enumerate() {
            row.copy_from_slice(&p[PARAM_SH + 3 * k..PARAM_SH + 3 * k + 3]);
        }
        Self {
            center: Vector3::new(p[0], p[1], p[2]),
            rotation: [p[3], p[4], p[5], p[6]],
            raw_scales: Vector3::new(p[7], p[8], p[9]),
            raw_signs: Vector3::new(p[10], p[11], p[12]),
            raw_opacity: p[13],
            sh,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Activated signed scales together with clamp flags for axes 1 and 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignedScales {
    pub s: [f64; 3],
    pub clamped: [bool; 2],
}

/// `s_k = tanh(t_k) exp(x_k)`, with `|s1|, |s2|` clamped to at least [`S_MIN`].
pub fn activate(raw_scales: &Vector3<f64>, raw_signs: &Vector3<f64>) -> Result<SignedScales> {
    if !raw_scales.iter().chain(raw_signs.iter()).all(|v| v.is_finite()) {
        return Err(QgsError::InvalidParameter(format!(
            "non-finite raw scale/sign: scales={:?} signs={:?}",
            raw_scales.as_slice(),
            raw_signs.as_slice()
        )));
    }
    let mut s = [0.0; 3];
    for k in 0..3 {
        s[k] = raw_signs[k].tanh() * raw_scales[k].exp();
    }
    let mut clamped = [false; 2];
    for k in 0..2 {
        if s[k].abs() < S_MIN {
            s[k] = sign_pos(s[k]) * S_MIN;
            clamped[k] = true;
        }
    }
    Ok(SignedScales { s, clamped })
}

/// Shape coefficients of the local surface `z = l1 x^2 + l2 y^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceShape {
    pub s: [f64; 3],
    pub lambda: [f64; 2],
    pub planar: bool,
}

impl SurfaceShape {
    pub fn new(s: [f64; 3]) -> Self {
        let planar = s[2].abs() < S3_FLAT;
        let lambda = if planar {
            [0.0, 0.0]
        } else {
            [
                sign_pos(s[0]) * s[2] / (s[0] * s[0]),
                sign_pos(s[1]) * s[2] / (s[1] * s[1]),
            ]
        };
        Self { s, lambda, planar }
    }

    /// Explicit height `z(x, y)` of the sheet.
    #[inline]
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.lambda[0] * x * x + self.lambda[1] * y * y
    }

    /// Curvature coefficient `a(theta)` of the cylindrical form `z = a rho^2`.
    #[inline]
    pub fn a_of_theta(&self, theta: f64) -> f64 {
        let (sn, cs) = theta.sin_cos();
        self.lambda[0] * cs * cs + self.lambda[1] * sn * sn
    }

    /// `x^2/s1^2 + y^2/s2^2`, i.e. `(rho / sigma(theta))^2`.
    #[inline]
    pub fn mahalanobis(&self, x: f64, y: f64) -> f64 {
        x * x / (self.s[0] * self.s[0]) + y * y / (self.s[1] * self.s[1])
    }

    /// True when both principal coefficients share a sign (bowl or flat).
    pub fn is_elliptic(&self) -> bool {
        self.lambda[0] * self.lambda[1] >= 0.0
    }
}

/// Height of the explicit surface for activated scales.
pub fn surface_height(s: [f64; 3], x: f64, y: f64) -> f64 {
    SurfaceShape::new(s).height(x, y)
}

/// A point in a primitive's local frame with its cylindrical coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl LocalPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Builds an on-surface point from cylindrical coordinates.
    pub fn on_surface(shape: &SurfaceShape, rho: f64, theta: f64) -> Self {
        let (sn, cs) = theta.sin_cos();
        let (x, y) = (rho * cs, rho * sn);
        Self::new(x, y, shape.height(x, y))
    }

    pub fn rho(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Azimuth in `[0, 2 pi)`.
    pub fn theta(&self) -> f64 {
        let t = self.y.atan2(self.x);
        if t < 0.0 {
            t + std::f64::consts::TAU
        } else {
            t
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalRay {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl LocalRay {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

/// Expresses a world ray in the primitive frame: `o' = R^T (o - c)`, `d' = R^T d`.
pub fn to_local(origin: &Vector3<f64>, dir: &Vector3<f64>, prim: &QuadricPrimitive) -> LocalRay {
    let rot = prim.rotation_matrix();
    LocalRay {
        origin: rot.tr_mul(&(origin - prim.center)),
        dir: rot.tr_mul(dir),
    }
}

/// Inverse of [`to_local`] for points.
pub fn to_world(p: &Vector3<f64>, prim: &QuadricPrimitive) -> Vector3<f64> {
    prim.rotation_matrix() * p + prim.center
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion of a rotation matrix (Shepperd's method).
pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    normalize_quat(q)
}

/// Pulls a gradient w.r.t. the rotation matrix back to the raw
/// (unnormalized) quaternion.
pub fn quat_matrix_vjp(raw: [f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let norm = (raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return [0.0; 4];
    }
    let [w, x, y, z] = [raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm];
    let g = d_rot;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let dq = [dw, dx, dy, dz];
    let qn = [w, x, y, z];
    let dot: f64 = dq.iter().zip(qn.iter()).map(|(a, b)| a * b).sum();
    [
        (dq[0] - qn[0] * dot) / norm,
        (dq[1] - qn[1] * dot) / norm,
        (dq[2] - qn[2] * dot) / norm,
        (dq[3] - qn[3] * dot) / norm,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn flat_params_roundtrip() {
        let mut p = QuadricPrimitive::new(Vector3::new(1.0, 2.0, 3.0));
        p.rotation = [0.9, 0.1, -0.2, 0.3];
        p.raw_scales = Vector3::new(-1.0, -2.0, -3.0);
        p.raw_signs = Vector3::new(0.5, -0.5, 2.0);
        p.raw_opacity = 0.7;
        p.sh[4][2] = 0.25;
        let flat = p.to_params();
        assert_eq!(flat[PARAM_SH + 4 * 3 + 2], 0.25);
        assert_eq!(flat[PARAM_RAW_OPACITY], 0.7);
        assert_eq!(QuadricPrimitive::from_params(&flat), p);
    }

    #[test]
    fn activate_examples() {
        let s = activate(&Vector3::new(0.0, 0.0, 0.0), &Vector3::new(20.0, 20.0, 20.0)).unwrap();
        for v in s.s {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
        let s = activate(&Vector3::zeros(), &Vector3::zeros()).unwrap();
        assert_eq!(s.s[0], S_MIN);
        assert_eq!(s.s[1], S_MIN);
        assert_eq!(s.s[2], 0.0);
        assert_eq!(s.clamped, [true, true]);
        // 2 tanh(1), mpmath: 1.52318831191152977623891656521
        let s = activate(
            &Vector3::new(2f64.ln(), 2f64.ln(), 2f64.ln()),
            &Vector3::new(1.0, 1.0, 1.0),
        )
        .unwrap();
        assert_relative_eq!(s.s[0], 1.523_188_311_911_529_8, epsilon = 1e-14);
    }

    #[test]
    fn activate_rejects_non_finite() {
        let err = activate(&Vector3::new(f64::NAN, 0.0, 0.0), &Vector3::zeros());
        assert!(matches!(err, Err(QgsError::InvalidParameter(_))));
        let err = activate(&Vector3::zeros(), &Vector3::new(0.0, f64::INFINITY, 0.0));
        assert!(err.is_err());
    }

    #[test]
    fn surface_height_examples() {
        assert_eq!(surface_height([1.0, 1.0, 1.0], 0.5, 0.0), 0.25);
        assert_eq!(surface_height([1.0, -1.0, 1.0], 0.0, 0.5), -0.25);
        assert_relative_eq!(surface_height([2.0, 1.0, 0.5], 1.0, 1.0), 0.625, epsilon = 1e-15);
        assert_eq!(surface_height([0.3, -2.0, 5.0], 0.0, 0.0), 0.0);
    }

    #[test]
    fn to_local_examples() {
        let mut prim = QuadricPrimitive::new(Vector3::zeros());
        let o = Vector3::new(0.3, -1.0, 2.0);
        let d = Vector3::new(0.0, 0.6, -0.8);
        let r = to_local(&o, &d, &prim);
        assert_eq!(r.origin, o);
        assert_eq!(r.dir, d);

        prim.center = Vector3::new(1.0, 0.0, 0.0);
        let r = to_local(&Vector3::new(1.0, 0.0, 5.0), &Vector3::new(0.0, 0.0, -1.0), &prim);
        assert_relative_eq!(r.origin, Vector3::new(0.0, 0.0, 5.0));

        // 90 degrees about z: local x maps to world y.
        prim.center = Vector3::zeros();
        let h = std::f64::consts::FRAC_PI_4;
        prim.rotation = [h.cos(), 0.0, 0.0, h.sin()];
        let r = to_local(&Vector3::new(1.0, 0.0, 0.0), &d, &prim);
        assert_relative_eq!(r.origin, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(to_world(&r.origin, &prim), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn planar_shape_has_zero_lambda() {
        let sh = SurfaceShape::new([1.0, 2.0, 1e-9]);
        assert!(sh.planar);
        assert_eq!(sh.lambda, [0.0, 0.0]);
        let sh = SurfaceShape::new([2.0, -1.0, 0.5]);
        assert_relative_eq!(sh.lambda[0], 0.125);
        assert_relative_eq!(sh.lambda[1], -0.5);
        assert!(!sh.is_elliptic());
    }

    #[test]
    fn quaternion_roundtrip() {
        let q = normalize_quat([0.3, -0.2, 0.9, 0.1]);
        let m = quat_to_matrix(q);
        let back = matrix_to_quat(&m);
        let sign = if back[0] * q[0] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..4 {
            assert_relative_eq!(back[k] * sign, q[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn quat_vjp_matches_finite_differences() {
        let raw = [0.7, -0.3, 0.4, 1.1];
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.9, 0.1, -0.4, 0.2, 0.8, -0.6);
        let f = |q: [f64; 4]| (quat_to_matrix(normalize_quat(q)).component_mul(&g)).sum();
        let an = quat_matrix_vjp(raw, &g);
        for k in 0..4 {
            let h = 1e-6;
            let mut p = raw;
            p[k] += h;
            let mut m = raw;
            m[k] -= h;
            let fd = (f(p) - f(m)) / (2.0 * h);
            assert_relative_eq!(an[k], fd, epsilon = 1e-8);
        }
    }

    fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |q| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(q in arb_quat()) {
            let m = quat_to_matrix(normalize_quat(q));
            let dev = (m.transpose() * m - Matrix3::identity()).abs().max();
            prop_assert!(dev < 1e-6);
        }

        #[test]
        fn to_local_then_back_is_identity(
            q in arb_quat(),
            c in prop::array::uniform3(-5.0f64..5.0),
            o in prop::array::uniform3(-5.0f64..5.0),
            d in prop::array::uniform3(-1.0f64..1.0),
        ) {
            prop_assume!(Vector3::from(d).norm() > 1e-3);
            let mut prim = QuadricPrimitive::new(Vector3::from(c));
            prim.rotation = q;
            let d = Vector3::from(d).normalize();
            let o = Vector3::from(o);
            let r = to_local(&o, &d, &prim);
            prop_assert!((r.dir.norm() - 1.0).abs() < 1e-9);
            prop_assert!((to_world(&r.origin, &prim) - o).norm() < 1e-9);
            prop_assert!((prim.rotation_matrix() * r.dir - d).norm() < 1e-9);
        }

        #[test]
        fn surface_height_is_even(
            s in prop::array::uniform3(0.05f64..3.0),
            signs in prop::array::uniform3(prop::bool::ANY),
            x in -3.0f64..3.0, y in -3.0f64..3.0,
        ) {
            let mut sc = s;
            for k in 0..3 { if signs[k] { sc[k] = -sc[k]; } }
            let z = surface_height(sc, x, y);
            prop_assert_eq!(z, surface_height(sc, -x, y));
            prop_assert_eq!(z, surface_height(sc, x, -y));
        }

        #[test]
        fn activate_monotone_in_scale_and_odd_in_sign(
            x in -3.0f64..3.0, dx in 0.01f64..1.0, t in 0.05f64..4.0,
        ) {
            let a = activate(&Vector3::new(x, x, x), &Vector3::new(t, t, t)).unwrap().s[2];
            let b = activate(&Vector3::new(x + dx, x + dx, x + dx), &Vector3::new(t, t, t)).unwrap().s[2];
            prop_assert!(b > a);
            let neg = activate(&Vector3::new(x, x, x), &Vector3::new(-t, -t, -t)).unwrap().s[2];
            prop_assert_eq!(neg, -a);
        }
    }
}
