//! Ray/paraboloid intersection and the near/far selection rule.
//!
//! Substituting `o + t d` into `l1 x^2 + l2 y^2 - z = 0` gives
//! `A t^2 + B t + C = 0` with
//!
//! ```text
//! A = l1 dx^2 + l2 dy^2
//! B = 2 (l1 ox dx + l2 oy dy) - dz
//! C = l1 ox^2 + l2 oy^2 - oz
//! ```
//!
//! When `|A|` is tiny the quadratic term is dropped and the single root
//! `-C/B` is used; this is the depth of the tangent plane at the foot of the
//! perpendicular dropped from the ray origin onto the sheet.

use crate::geodesic::{DensityModel, SUPPORT_SIGMAS};
use crate::primitive::{LocalPoint, LocalRay, SurfaceShape};

/// Hits at or before this ray depth are ignored.
pub const T_NEAR_CLIP: f64 = 0.01;
/// `|A|` below which the linear approximation is used.
pub const A_DEGENERATE: f64 = 1e-6;
/// `|B|` below which a degenerate ray is treated as parallel to the sheet.
pub const B_PARALLEL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quadratic {
    pub fn of_ray(shape: &SurfaceShape, ray: &LocalRay) -> Self {
        let [l1, l2] = shape.lambda;
        let (o, d) = (&ray.origin, &ray.dir);
        Self {
            a: l1 * d.x * d.x + l2 * d.y * d.y,
            b: 2.0 * (l1 * o.x * d.x + l2 * o.y * d.y) - d.z,
            c: l1 * o.x * o.x + l2 * o.y * o.y - o.z,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.a.abs() < A_DEGENERATE
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Candidates {
    None,
    /// A double root or the linear (`|A|` small) approximation.
    Single { t: f64, linear: bool },
    Pair { near: f64, far: f64 },
}

/// Candidate ray depths where the ray meets the sheet, ordered `near <= far`.
pub fn intersect(shape: &SurfaceShape, ray: &LocalRay) -> Candidates {
    solve(&Quadratic::of_ray(shape, ray))
}

pub fn solve(q: &Quadratic) -> Candidates {
    if q.is_degenerate() {
        if q.b.abs() < B_PARALLEL {
            return Candidates::None;
        }
        return Candidates::Single {
            t: -q.c / q.b,
            linear: true,
        };
    }
    let disc = q.b * q.b - 4.0 * q.a * q.c;
    if disc < 0.0 {
        return Candidates::None;
    }
    if disc == 0.0 {
        return Candidates::Single {
            t: -q.b / (2.0 * q.a),
            linear: false,
        };
    }
    // t = (-B -/+ sign(A) sqrt(disc)) / 2A, evaluated without cancellation.
    let root = disc.sqrt();
    let h = -0.5 * (q.b + q.b.signum() * root);
    let (r1, r2) = if h == 0.0 { (0.0, 0.0) } else { (h / q.a, q.c / h) };
    if r1 <= r2 {
        Candidates::Pair { near: r1, far: r2 }
    } else {
        Candidates::Pair { near: r2, far: r1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RootKind {
    Near,
    Far,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intersection {
    /// Depth along the (unit) ray.
    pub t: f64,
    pub point: LocalPoint,
    /// Distance from the vertex as measured by the density model.
    pub geodesic_l: f64,
    pub sigma_at_theta: f64,
    pub weight: f64,
    /// Density exponent `(l / sigma)^2`; the hit is valid when it is at most 9.
    pub exponent: f64,
    pub root: RootKind,
}

impl Intersection {
    pub fn rho(&self) -> f64 {
        self.point.rho()
    }

    pub fn theta(&self) -> f64 {
        self.point.theta()
    }
}

/// Evaluates one candidate depth; `None` when clipped or outside the 3-sigma support.
pub fn evaluate_candidate(
    shape: &SurfaceShape,
    ray: &LocalRay,
    t: f64,
    root: RootKind,
    density: &dyn DensityModel,
) -> Option<Intersection> {
    if !(t > T_NEAR_CLIP) {
        return None;
    }
    let p = ray.at(t);
    let (x, y) = (p.x, p.y);
    let q = shape.mahalanobis(x, y);
    // The stretch is at least 1, so this rejects before the costly part.
    if !(q <= SUPPORT_SIGMAS * SUPPORT_SIGMAS) {
        return None;
    }
    let rho = (x * x + y * y).sqrt();
    let u = if rho > 0.0 { 2.0 * shape.height(x, y) / rho } else { 0.0 };
    let (stretch, _) = density.stretch(u);
    let exponent = stretch * q;
    if !(exponent <= SUPPORT_SIGMAS * SUPPORT_SIGMAS) {
        return None;
    }
    let sigma_at_theta = if q > 0.0 { rho / q.sqrt() } else { shape.s[0].abs() };
    Some(Intersection {
        t,
        point: LocalPoint::new(x, y, p.z),
        geodesic_l: rho * stretch.sqrt(),
        sigma_at_theta,
        weight: (-0.5 * exponent).exp(),
        exponent,
        root,
    })
}

/// Near hit if within 3 sigma, else far hit if within 3 sigma, else nothing.
pub fn select_valid(
    shape: &SurfaceShape,
    ray: &LocalRay,
    candidates: Candidates,
    density: &dyn DensityModel,
) -> Option<Intersection> {
    match candidates {
        Candidates::None => None,
        Candidates::Single { t, linear } => {
            let kind = if linear { RootKind::Linear } else { RootKind::Near };
            evaluate_candidate(shape, ray, t, kind, density)
        }
        Candidates::Pair { near, far } => evaluate_candidate(shape, ray, near, RootKind::Near, density)
            .or_else(|| evaluate_candidate(shape, ray, far, RootKind::Far, density)),
    }
}

/// Convenience: intersect and select in one call.
pub fn trace(shape: &SurfaceShape, ray: &LocalRay, density: &dyn DensityModel) -> Option<Intersection> {
    select_valid(shape, ray, intersect(shape, ray), density)
}
