//! Closed-form geodesic distance on the paraboloid and the on-surface
//! Gaussian built from it.
//!
//! Along the azimuth `theta` the sheet is the parabola `z = a rho^2`, whose
//! arc length from the vertex is
//!
//! ```text
//! l(a, rho) = [asinh(u) + u sqrt(1 + u^2)] / (4a),   u = 2 a rho
//! ```
//!
//! The weight of a surface point is `exp(-l^2 / (2 sigma(theta)^2))` with
//! `sigma(theta)` the radius of the `(s1, s2)` contour ellipse.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{QgsError, Result};
use crate::primitive::{LocalPoint, SurfaceShape};
use crate::registry::Registry;

/// Below this `|u|` the arc length uses its Taylor series.
pub const U_SERIES: f64 = 1e-3;
/// Below this `|a|` the radius solve uses its linear limit.
pub const A_LINEAR: f64 = 1e-8;
/// Density support radius in standard deviations.
pub const SUPPORT_SIGMAS: f64 = 3.0;

pub fn arc_length(a: f64, rho: f64) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(QgsError::Domain(format!("arc length needs rho >= 0, got {rho}")));
    }
    let u = 2.0 * a * rho;
    if u.abs() < U_SERIES {
        let u2 = u * u;
        return Ok(rho * (1.0 + u2 / 6.0 - u2 * u2 / 40.0));
    }
    // Even in `a`: evaluate with magnitudes so the log term never cancels.
    let (w, aa) = (u.abs(), a.abs());
    let root = (w * w + 1.0).sqrt();
    Ok(((root + w).ln() + w * root) / (4.0 * aa))
}

/// `l / rho` as a function of `u = 2 a rho`, with its derivative.
///
/// This is the factor by which geodesic distance stretches the radial
/// coordinate; it is even in `u` and equals 1 at the vertex.
pub fn arc_ratio(u: f64) -> (f64, f64) {
    let w = u.abs();
    let f = if w < U_SERIES {
        let u2 = u * u;
        1.0 + u2 / 6.0 - u2 * u2 / 40.0 + u2 * u2 * u2 / 112.0
    } else {
        (w.asinh() + w * (1.0 + w * w).sqrt()) / (2.0 * w)
    };
    let df = if w < 0.05 {
        let u2 = u * u;
        u * (1.0 / 3.0 + u2 * (-0.1 + u2 * (3.0 / 56.0 + u2 * (-5.0 / 144.0 + u2 * 35.0 / 1408.0))))
    } else {
        u.signum() * (w * (1.0 + w * w).sqrt() - w.asinh()) / (2.0 * w * w)
    };
    (f, df)
}

/// Radius of the contour ellipse with semi-axes `|s1|`, `|s2|` along `theta`.
pub fn sigma(s1: f64, s2: f64, theta: f64) -> f64 {
    let (a, b) = (s1.abs(), s2.abs());
    let (sn, cs) = theta.sin_cos();
    a * b / ((b * cs).powi(2) + (a * sn).powi(2)).sqrt()
}

/// Geodesic Gaussian weight of an on-surface point.
pub fn gaussian_weight(shape: &SurfaceShape, p: &LocalPoint) -> Result<f64> {
    let rho = p.rho();
    let theta = p.theta();
    let a = shape.a_of_theta(theta);
    let expected = a * rho * rho;
    if (p.z - expected).abs() > 1e-6 * (1.0 + p.z.abs()) {
        return Err(QgsError::Contract(format!(
            "point ({}, {}, {}) is off the surface (expected z = {expected})",
            p.x, p.y, p.z
        )));
    }
    if rho == 0.0 {
        return Ok(1.0);
    }
    let sig = sigma(shape.s[0], shape.s[1], theta);
    let l = if shape.planar { rho } else { arc_length(a, rho)? };
    Ok((-(l * l) / (2.0 * sig * sig)).exp())
}

/// Quadratic under-estimate of the arc length used for screen bounds.
pub fn approx_arc_length(a: f64, rho: f64) -> f64 {
    (4.0 * a.abs() * rho * rho + 6.0 * rho) / 7.0
}

/// Positive root of `approx_arc_length(a, rho) = target`.
pub fn solve_radius_for_sigma(a: f64, target: f64) -> Result<f64> {
    if !(target > 0.0) {
        return Err(QgsError::Domain(format!("radius solve needs a positive target, got {target}")));
    }
    let aa = a.abs();
    if aa < A_LINEAR {
        return Ok(7.0 * target / 6.0);
    }
    // (-6 + sqrt(36 + 112|a|s)) / (8|a|), rationalized.
    Ok(14.0 * target / (6.0 + (36.0 + 112.0 * aa * target).sqrt()))
}

/// How distance from the primitive center is measured on the surface.
///
/// The density exponent of a surface point is `-F(u) q / 2`, where
/// `q = x^2/s1^2 + y^2/s2^2` and `u = 2 a(theta) rho`; `F` is the squared
/// ratio of the chosen distance to `rho`.
pub trait DensityModel: Send + Sync + Debug {
    fn name(&self) -> &'static str;
    /// `F(u)` and `dF/du`. `F(u) >= 1`: distance never falls below the
    /// in-plane radius.
    fn stretch(&self, u: f64) -> (f64, f64);
    /// An upper bound on the radius `rho` at which the distance along a
    /// parabola `z = a rho^2` reaches `target`.
    fn support_radius(&self, a: f64, target: f64) -> f64;
}

/// Distance is the closed-form geodesic arc length.
#[derive(Debug, Default, Clone, Copy)]
pub struct GeodesicDensity;

impl DensityModel for GeodesicDensity {
    fn name(&self) -> &'static str {
        "geodesic"
    }

    #[inline]
    fn stretch(&self, u: f64) -> (f64, f64) {
        let (f, df) = arc_ratio(u);
        (f * f, 2.0 * f * df)
    }

    fn support_radius(&self, a: f64, target: f64) -> f64 {
        // The quadratic approximation never exceeds the true arc length.
        solve_radius_for_sigma(a, target).unwrap_or(0.0)
    }
}

/// Distance is the in-plane radius `rho`, ignoring curvature.
#[derive(Debug, Default, Clone, Copy)]
pub struct EuclideanDensity;

impl DensityModel for EuclideanDensity {
    fn name(&self) -> &'static str {
        "euclidean"
    }

    #[inline]
    fn stretch(&self, _u: f64) -> (f64, f64) {
        (1.0, 0.0)
    }

    fn support_radius(&self, _a: f64, target: f64) -> f64 {
        target.max(0.0)
    }
}

pub fn density_registry() -> Registry<dyn DensityModel> {
    let mut reg: Registry<dyn DensityModel> = Registry::new("density model");
    reg.register("geodesic", || Arc::new(GeodesicDensity))
        .register("euclidean", || Arc::new(EuclideanDensity));
    reg
}
