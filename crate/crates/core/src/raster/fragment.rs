use nalgebra::Vector3;

use crate::geodesic::DensityModel;
use crate::geometry::{curvature_at, local_normal_unnormalized};
use crate::intersect::{trace, RootKind};
use crate::primitive::{LocalPoint, LocalRay};

use super::{Prepared, ALPHA_MAX, ALPHA_MIN};

/// A shaded ray/primitive hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    /// Position of the primitive in its tile list.
    pub pos: u32,
    /// Ray depth along the unit world ray.
    pub t: f64,
    /// Camera z-depth.
    pub z: f64,
    pub root: RootKind,
    pub local: Vector3<f64>,
    pub local_dir: Vector3<f64>,
    pub weight: f64,
    pub alpha_bar: f64,
    /// True when `alpha_bar` hit the upper clamp.
    pub clamped: bool,
    /// Unit local normal before orientation.
    pub n_local: Vector3<f64>,
    /// +1 or -1 so that the normal faces the camera.
    pub flip: f64,
    pub normal_cam: Vector3<f64>,
    pub curvature: f64,
}

/// Intersects a pixel ray with a prepared primitive. `None` when the ray
/// misses the 3-sigma support or the blended alpha is negligible.
#[inline]
pub fn shade(
    prep: &Prepared,
    pos: u32,
    dir_world: &Vector3<f64>,
    z_scale: f64,
    density: &dyn DensityModel,
) -> Option<Fragment> {
    let local_dir = prep.rot_t * dir_world;
    let ray = LocalRay {
        origin: prep.origin_local,
        dir: local_dir,
    };
    let hit = trace(&prep.shape, &ray, density)?;
    let raw_alpha = prep.opacity * hit.weight;
    if raw_alpha < ALPHA_MIN {
        return None;
    }
    let clamped = raw_alpha > ALPHA_MAX;
    let local = ray.at(hit.t);
    let n_local = local_normal_unnormalized(&prep.shape, local.x, local.y).normalize();
    let flip = if (prep.rot * n_local).dot(dir_world) > 0.0 { -1.0 } else { 1.0 };
    Some(Fragment {
        pos,
        t: hit.t,
        z: hit.t * z_scale,
        root: hit.root,
        local,
        local_dir,
        weight: hit.weight,
        alpha_bar: raw_alpha.min(ALPHA_MAX),
        clamped,
        n_local,
        flip,
        normal_cam: prep.rot_cam * n_local * flip,
        curvature: curvature_at(&prep.shape, &LocalPoint::new(local.x, local.y, local.z)),
    })
}

/// Upstream gradients of one fragment's shaded quantities.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct FragmentUpstream {
    pub weight: f64,
    pub z: f64,
    /// W.r.t. the unit local normal (already un-rotated and un-flipped).
    pub n_local: Vector3<f64>,
    pub curvature: f64,
}

/// Gradients w.r.t. the local ray and the shape coefficients.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct FragmentGrad {
    pub origin_local: Vector3<f64>,
    pub dir_local: Vector3<f64>,
    pub lambda: [f64; 2],
    /// Through the Mahalanobis term only.
    pub s12: [f64; 2],
}

/// Reverse-mode pass over [`shade`]'s geometry for one fragment.
pub(crate) fn fragment_vjp(
    prep: &Prepared,
    frag: &Fragment,
    z_scale: f64,
    up: &FragmentUpstream,
    density: &dyn DensityModel,
) -> FragmentGrad {
    let shape = &prep.shape;
    let [l1, l2] = shape.lambda;
    let [s1, s2] = [shape.s[0], shape.s[1]];
    let (x, y) = (frag.local.x, frag.local.y);
    let mut g = FragmentGrad::default();
    let (mut dx, mut dy) = (0.0, 0.0);
    let mut dl = [0.0f64; 2];

    // Weight G = exp(-F(u) q / 2).
    if up.weight != 0.0 {
        let d_e = -0.5 * frag.weight * up.weight;
        let q = shape.mahalanobis(x, y);
        let rho2 = x * x + y * y;
        let rho = rho2.sqrt();
        let h = l1 * x * x + l2 * y * y;
        let u = if rho > 0.0 { 2.0 * h / rho } else { 0.0 };
        let (f, df) = density.stretch(u);
        let d_q = d_e * f;
        dx += d_q * 2.0 * x / (s1 * s1);
        dy += d_q * 2.0 * y / (s2 * s2);
        g.s12[0] += d_q * -2.0 * x * x / (s1 * s1 * s1);
        g.s12[1] += d_q * -2.0 * y * y / (s2 * s2 * s2);
        if rho > 0.0 && df != 0.0 {
            let d_u = d_e * df * q;
            let rho3 = rho2 * rho;
            dx += d_u * (4.0 * l1 * x / rho - 2.0 * h * x / rho3);
            dy += d_u * (4.0 * l2 * y / rho - 2.0 * h * y / rho3);
            dl[0] += d_u * 2.0 * x * x / rho;
            dl[1] += d_u * 2.0 * y * y / rho;
        }
    }

    // Normal n = m / |m|, m = (2 l1 x, 2 l2 y, -1).
    if up.n_local != Vector3::zeros() {
        let m = Vector3::new(2.0 * l1 * x, 2.0 * l2 * y, -1.0);
        let n = frag.n_local;
        let d_m = (up.n_local - n * n.dot(&up.n_local)) / m.norm();
        dl[0] += d_m.x * 2.0 * x;
        dl[1] += d_m.y * 2.0 * y;
        dx += d_m.x * 2.0 * l1;
        dy += d_m.y * 2.0 * l2;
    }

    // K = 4 l1 l2 / E^2, E = 1 + 4 l1^2 x^2 + 4 l2^2 y^2.
    if up.curvature != 0.0 && !shape.planar {
        let e = 1.0 + 4.0 * l1 * l1 * x * x + 4.0 * l2 * l2 * y * y;
        let e2 = e * e;
        let k = frag.curvature;
        let dk = up.curvature;
        dl[0] += dk * (4.0 * l2 / e2 - 2.0 * k / e * 8.0 * l1 * x * x);
        dl[1] += dk * (4.0 * l1 / e2 - 2.0 * k / e * 8.0 * l2 * y * y);
        dx += dk * (-2.0 * k / e * 8.0 * l1 * l1 * x);
        dy += dk * (-2.0 * k / e * 8.0 * l2 * l2 * y);
    }

    // Hit point p = o + t d.
    let o = &prep.origin_local;
    let d = &frag.local_dir;
    let t = frag.t;
    g.origin_local.x += dx;
    g.origin_local.y += dy;
    g.dir_local.x += t * dx;
    g.dir_local.y += t * dy;
    let d_t = up.z * z_scale + dx * d.x + dy * d.y;

    // Root t of A t^2 + B t + C = 0 (or t = -C/B on the linear path).
    if d_t != 0.0 {
        let a = l1 * d.x * d.x + l2 * d.y * d.y;
        let b = 2.0 * (l1 * o.x * d.x + l2 * o.y * d.y) - d.z;
        let linear = frag.root == RootKind::Linear;
        let denom = if linear { b } else { 2.0 * a * t + b };
        let d_a = if linear { 0.0 } else { -d_t * t * t / denom };
        let d_b = -d_t * t / denom;
        let d_c = -d_t / denom;
        dl[0] += d_a * d.x * d.x + d_b * 2.0 * o.x * d.x + d_c * o.x * o.x;
        dl[1] += d_a * d.y * d.y + d_b * 2.0 * o.y * d.y + d_c * o.y * o.y;
        g.dir_local.x += d_a * 2.0 * l1 * d.x + d_b * 2.0 * l1 * o.x;
        g.dir_local.y += d_a * 2.0 * l2 * d.y + d_b * 2.0 * l2 * o.y;
        g.dir_local.z -= d_b;
        g.origin_local.x += d_b * 2.0 * l1 * d.x + d_c * 2.0 * l1 * o.x;
        g.origin_local.y += d_b * 2.0 * l2 * d.y + d_c * 2.0 * l2 * o.y;
        g.origin_local.z -= d_c;
    }
    g.lambda = dl;
    g
}
