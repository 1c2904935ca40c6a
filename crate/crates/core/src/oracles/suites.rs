//! Randomized comparisons of production code against the oracles, sized
//! for the acceptance runs. Each returns the worst observed discrepancy
//! so callers decide on tolerances.

use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fd_normal, fundamental_forms_curvature, march_intersection, quadrature_arc_length, relative_error};
use crate::bounds::{loose_bbox_placed, tight_bbox_placed, PlacedShape};
use crate::camera::{Camera, Intrinsics};
use crate::geodesic::{arc_length, GeodesicDensity};
use crate::geometry::{curvature_at, local_normal_unnormalized};
use crate::intersect::{trace, Quadratic, A_DEGENERATE};
use crate::primitive::{LocalPoint, LocalRay, SurfaceShape};

#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicReport {
    pub points: usize,
    pub max_rel: f64,
    /// Worst `|l - rho| / rho` over `|a| <= 1e-4`.
    pub max_flat_rel: f64,
    pub seconds: f64,
}

/// Closed-form arc length against quadrature on an `n x n` grid of
/// curvature (signed, log-spaced magnitudes) and radius.
pub fn geodesic_suite(n: usize) -> GeodesicReport {
    let start = Instant::now();
    let half = n / 2;
    let mags: Vec<f64> = (0..half).map(|i| 10f64.powf(-7.0 + 8.0 * i as f64 / (half - 1).max(1) as f64)).collect();
    let a_values: Vec<f64> = mags.iter().flat_map(|m| [*m, -*m]).chain((mags.len() * 2..n).map(|_| 0.0)).collect();
    let mut rep = GeodesicReport {
        points: 0,
        max_rel: 0.0,
        max_flat_rel: 0.0,
        seconds: 0.0,
    };
    for &a in &a_values {
        for j in 0..n {
            let rho = 5.0 * (j + 1) as f64 / n as f64;
            let l = arc_length(a, rho).expect("valid input");
            let q = quadrature_arc_length(a, rho);
            rep.max_rel = rep.max_rel.max((l - q).abs() / q);
            if a.abs() <= 1e-4 {
                rep.max_flat_rel = rep.max_flat_rel.max((l - rho).abs() / rho);
            }
            rep.points += 1;
        }
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}

fn random_shape(rng: &mut ChaCha8Rng) -> SurfaceShape {
    let signed = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let v: f64 = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    };
    let s3 = match rng.gen_range(0..6) {
        0 => 0.0,
        _ => signed(rng, 0.02, 1.0),
    };
    SurfaceShape::new([signed(rng, 0.2, 1.5), signed(rng, 0.2, 1.5), s3])
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionReport {
    pub pairs: usize,
    pub hits: usize,
    pub disagreements: usize,
    pub max_dt: f64,
    /// Relative jump in depth across the `|A|` switch.
    pub seam_rel: f64,
    pub seconds: f64,
}

/// `trace` against the ray marcher on random rays aimed near the support.
pub fn intersection_suite(pairs: usize, seed: u64) -> IntersectionReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = IntersectionReport {
        pairs,
        hits: 0,
        disagreements: 0,
        max_dt: 0.0,
        seam_rel: 0.0,
        seconds: 0.0,
    };
    for _ in 0..pairs {
        let shape = random_shape(&mut rng);
        // A target on the sheet out to 4 sigma so that some rays miss.
        let r = 4.0 * rng.gen_range(0.0f64..1.0).sqrt();
        let th = rng.gen_range(0.0..std::f64::consts::TAU);
        let (x, y) = (r * shape.s[0].abs() * th.cos(), r * shape.s[1].abs() * th.sin());
        let target = Vector3::new(x, y, shape.height(x, y));
        let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if dir.norm() < 0.1 {
            continue;
        }
        let dir = dir.normalize();
        let dist = rng.gen_range(0.5..4.0);
        let ray = LocalRay {
            origin: target - dir * dist,
            dir,
        };
        let got = trace(&shape, &ray, &GeodesicDensity).map(|h| h.t);
        // Support points lie within 4.5 of the vertex, so this reaches every valid root.
        let want = march_intersection(&shape, &ray, dist + target.norm() + 5.0, 5e-4);
        match (got, want) {
            (Some(a), Some(b)) => {
                rep.hits += 1;
                rep.max_dt = rep.max_dt.max((a - b).abs());
            }
            (None, None) => {}
            _ => rep.disagreements += 1,
        }
    }
    // Seam: the same geometry just below and just above the switch.
    for k in 0..50 {
        let l1 = 0.5 + 0.05 * k as f64;
        let shape = SurfaceShape::new([1.0 / l1.sqrt(), 1.0, 1.0]);
        let t_at = |target: f64| {
            let d2 = target / (l1 - target);
            let ray = LocalRay {
                origin: Vector3::new(0.1, -0.05, 2.0),
                dir: Vector3::new(d2.sqrt(), 0.0, -1.0).normalize(),
            };
            let q = Quadratic::of_ray(&shape, &ray);
            assert_eq!(q.is_degenerate(), target < A_DEGENERATE, "seam ray built on the wrong side");
            trace(&shape, &ray, &GeodesicDensity).expect("seam ray hits").t
        };
        let below = t_at(A_DEGENERATE * (1.0 - 1e-6));
        let above = t_at(A_DEGENERATE * (1.0 + 1e-6));
        rep.seam_rel = rep.seam_rel.max((below - above).abs() / above);
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifferentialReport {
    pub points: usize,
    /// Worst distance between unit normals.
    pub max_normal_err: f64,
    pub max_curvature_rel: f64,
    pub vertex_elliptic: f64,
    pub vertex_hyperbolic: f64,
    pub seconds: f64,
}

/// Normals against differenced implicit gradients and curvature against
/// differenced fundamental forms at random on-sheet points.
pub fn differential_suite(points: usize, seed: u64) -> DifferentialReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = DifferentialReport {
        points,
        max_normal_err: 0.0,
        max_curvature_rel: 0.0,
        vertex_elliptic: curvature_at(&SurfaceShape::new([1.0, 1.0, 1.0]), &LocalPoint::new(0.0, 0.0, 0.0)),
        vertex_hyperbolic: curvature_at(&SurfaceShape::new([1.0, -1.0, 1.0]), &LocalPoint::new(0.0, 0.0, 0.0)),
        seconds: 0.0,
    };
    let mut done = 0;
    while done < points {
        let shape = random_shape(&mut rng);
        if shape.planar {
            continue;
        }
        let x = rng.gen_range(-2.0..2.0) * shape.s[0].abs();
        let y = rng.gen_range(-2.0..2.0) * shape.s[1].abs();
        let z = shape.height(x, y);
        let n = local_normal_unnormalized(&shape, x, y).normalize();
        // Central differences of a quadratic are exact; the step only sets rounding.
        let fd = fd_normal(&shape, x, y, z, 1e-3);
        rep.max_normal_err = rep.max_normal_err.max((n - fd).norm());
        let k = curvature_at(&shape, &LocalPoint::new(x, y, z));
        let k_ref = fundamental_forms_curvature(&shape, x, y, 1e-2);
        rep.max_curvature_rel = rep.max_curvature_rel.max(relative_error(k, k_ref, 1e-300));
        done += 1;
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundsReport {
    pub configurations: usize,
    pub rays: usize,
    /// Rays inside the support whose pixel lies outside the tight box.
    pub escaped: usize,
    /// Rays that hit the support at all.
    pub supported: usize,
    /// Configurations where the tight box is not inside the loose box.
    pub tight_not_in_loose: usize,
    pub seconds: f64,
}

/// Pixel-center rays around random primitives: any ray hitting the
/// 3-sigma support (weight at least `exp(-9/2)`, found by the marcher)
/// must belong to a pixel of the tight box.
pub fn bounds_suite(configurations: usize, rays_per: usize, seed: u64) -> BoundsReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (96usize, 72usize);
    let mut rep = BoundsReport {
        configurations,
        rays: 0,
        escaped: 0,
        supported: 0,
        tight_not_in_loose: 0,
        seconds: 0.0,
    };
    for _ in 0..configurations {
        let shape = loop {
            let s = random_shape(&mut rng);
            if !s.planar || rng.gen_bool(0.3) {
                break s;
            }
        };
        let shape = SurfaceShape::new([shape.s[0] * 0.4, shape.s[1] * 0.4, shape.s[2] * 0.4]);
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rot = UnitQuaternion::from_scaled_axis(axis * 3.0).to_rotation_matrix().into_inner();
        let center = Vector3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.6..0.6), rng.gen_range(-0.5..0.5));
        let eye = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), -rng.gen_range(2.5..4.0));
        let camera = Camera::look_at(
            "bounds",
            eye,
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            Intrinsics::from_fov(w, h, 0.9),
            w,
            h,
        );
        let placed = PlacedShape {
            center,
            rotation: rot,
            shape,
        };
        let tight = tight_bbox_placed(&placed, &camera, &GeodesicDensity);
        let loose = loose_bbox_placed(&placed, &camera, &GeodesicDensity);
        if !loose.contains_box(&tight) {
            rep.tight_not_in_loose += 1;
        }
        // Sample pixels from the loose box grown by half its size, so that
        // escapes just outside the tight box are exercised.
        let (lo, hi) = if loose.is_empty() {
            ([0i64, 0i64], [w as i64 - 1, h as i64 - 1])
        } else {
            let gx = (loose.max_px[0] - loose.min_px[0]) / 2 + 2;
            let gy = (loose.max_px[1] - loose.min_px[1]) / 2 + 2;
            (
                [(loose.min_px[0] - gx).max(0), (loose.min_px[1] - gy).max(0)],
                [(loose.max_px[0] + gx).min(w as i64 - 1), (loose.max_px[1] + gy).min(h as i64 - 1)],
            )
        };
        let t_max = (camera.center() - center).norm() + 4.0;
        for _ in 0..rays_per {
            let px = rng.gen_range(lo[0]..=hi[0]) as usize;
            let py = rng.gen_range(lo[1]..=hi[1]) as usize;
            let ray = camera.pixel_ray(px, py);
            let local = LocalRay {
                origin: rot.transpose() * (ray.origin - center),
                dir: rot.transpose() * ray.dir,
            };
            rep.rays += 1;
            if march_intersection(&shape, &local, t_max, 2e-3).is_some() {
                rep.supported += 1;
                if !tight.contains(px, py) {
                    rep.escaped += 1;
                }
            }
        }
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}
