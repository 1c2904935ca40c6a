//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Basis ordering and signs follow the common 3D Gaussian splatting
//! convention, so coefficient files interoperate with that ecosystem.

use nalgebra::Vector3;

pub const MAX_SH_DEGREE: usize = 3;
pub const MAX_SH_COEFFS: usize = 16;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Offset that maps a zero DC coefficient to mid-grey.
pub const COLOR_OFFSET: f64 = 0.5;

/// DC coefficient that renders as `rgb`.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - COLOR_OFFSET) / C0
}

/// Basis values at a unit direction. Entries past `num_coeffs(degree)` are zero.
pub fn basis(degree: usize, d: &Vector3<f64>) -> [f64; MAX_SH_COEFFS] {
    let mut out = [0.0; MAX_SH_COEFFS];
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = C0;
    if degree >= 1 {
        out[1] = -C1 * y;
        out[2] = C1 * z;
        out[3] = -C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = C2[0] * x * y;
        out[5] = C2[1] * y * z;
        out[6] = C2[2] * (2.0 * zz - xx - yy);
        out[7] = C2[3] * x * z;
        out[8] = C2[4] * (xx - yy);
        if degree >= 3 {
            out[9] = C3[0] * y * (3.0 * xx - yy);
            out[10] = C3[1] * x * y * z;
            out[11] = C3[2] * y * (4.0 * zz - xx - yy);
            out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            out[13] = C3[4] * x * (4.0 * zz - xx - yy);
            out[14] = C3[5] * z * (xx - yy);
            out[15] = C3[6] * x * (xx - 3.0 * yy);
        }
    }
    out
}

/// Partial derivatives of each basis polynomial w.r.t. `(x, y, z)`, treating
/// the components as independent.
pub fn basis_gradient(degree: usize, d: &Vector3<f64>) -> [[f64; 3]; MAX_SH_COEFFS] {
    let mut g = [[0.0; 3]; MAX_SH_COEFFS];
    let (x, y, z) = (d.x, d.y, d.z);
    if degree >= 1 {
        g[1] = [0.0, -C1, 0.0];
        g[2] = [0.0, 0.0, C1];
        g[3] = [-C1, 0.0, 0.0];
    }
    if degree >= 2 {
        g[4] = [C2[0] * y, C2[0] * x, 0.0];
        g[5] = [0.0, C2[1] * z, C2[1] * y];
        g[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        g[7] = [C2[3] * z, 0.0, C2[3] * x];
        g[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
        if degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            g[9] = [6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
            g[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
            g[11] = [
                -2.0 * C3[2] * x * y,
                C3[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * C3[2] * y * z,
            ];
            g[12] = [
                -6.0 * C3[3] * x * z,
                -6.0 * C3[3] * y * z,
                C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                C3[4] * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * C3[4] * x * y,
                8.0 * C3[4] * x * z,
            ];
            g[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
            g[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];
        }
    }
    g
}

/// Evaluated color before and after the non-negativity clamp.
#[derive(Clone, Copy, Debug)]
pub struct ShColor {
    pub rgb: [f64; 3],
    pub clamped: [bool; 3],
}

pub fn eval_color(degree: usize, coeffs: &[[f64; 3]; MAX_SH_COEFFS], dir: &Vector3<f64>) -> ShColor {
    let b = basis(degree, dir);
    let mut rgb = [COLOR_OFFSET; 3];
    for (k, bk) in b.iter().enumerate().take(num_coeffs(degree)) {
        for c in 0..3 {
            rgb[c] += bk * coeffs[k][c];
        }
    }
    let mut clamped = [false; 3];
    for c in 0..3 {
        if rgb[c] < 0.0 {
            rgb[c] = 0.0;
            clamped[c] = true;
        }
    }
    ShColor { rgb, clamped }
}

/// Backward of [`eval_color`] at a unit direction `dir`. Adds coefficient
/// gradients into `d_coeffs` and returns the gradient w.r.t. `dir` as a
/// free 3-vector (before projecting onto the sphere's tangent plane).
pub fn eval_color_backward(
    degree: usize,
    coeffs: &[[f64; 3]; MAX_SH_COEFFS],
    dir: &Vector3<f64>,
    color: &ShColor,
    d_rgb: [f64; 3],
    d_coeffs: &mut [[f64; 3]; MAX_SH_COEFFS],
) -> Vector3<f64> {
    let mut g = d_rgb;
    for c in 0..3 {
        if color.clamped[c] {
            g[c] = 0.0;
        }
    }
    let b = basis(degree, dir);
    let bg = basis_gradient(degree, dir);
    let mut d_dir = Vector3::zeros();
    for k in 0..num_coeffs(degree) {
        let mut proj = 0.0;
        for c in 0..3 {
            d_coeffs[k][c] += b[k] * g[c];
            proj += coeffs[k][c] * g[c];
        }
        d_dir += Vector3::new(bg[k][0], bg[k][1], bg[k][2]) * proj;
    }
    d_dir
}
