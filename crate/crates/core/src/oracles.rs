//! Slow, independent reference implementations used only by tests.
//!
//! Each routine here recomputes a production quantity by a different
//! method (quadrature instead of the closed form, ray marching instead of
//! the quadratic solve, a global per-pixel sort instead of tiles and the
//! staging buffer, and so on). Enabled with the `oracles` feature.

pub mod suites;

use nalgebra::{Matrix3, Vector3};

use crate::camera::Camera;
use crate::geodesic::{sigma, SUPPORT_SIGMAS};
use crate::intersect::T_NEAR_CLIP;
use crate::maps::Map;
use crate::primitive::{LocalRay, QuadricPrimitive, SurfaceShape};
use crate::raster::{prepare, shade, Fragment, RenderSettings, T_TERMINATE};

// ----------------------------------------------------------------------
// Quadrature

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson integral of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Arc length of `z = a r^2` over `r in [0, rho]` by quadrature of the
/// line element `sqrt(1 + (dz/dr)^2)`.
pub fn quadrature_arc_length(a: f64, rho: f64) -> f64 {
    let f = |r: f64| (1.0 + 4.0 * a * a * r * r).sqrt();
    integrate(&f, 0.0, rho, 1e-14 * rho.max(1e-300))
}

/// Is the on-surface point at local `(x, y)` inside the 3-sigma geodesic support?
/// Distance by quadrature, sigma from the contour ellipse.
pub fn inside_support(shape: &SurfaceShape, x: f64, y: f64) -> (bool, f64) {
    let rho = x.hypot(y);
    if rho == 0.0 {
        return (true, 0.0);
    }
    let theta = y.atan2(x);
    let a = shape.a_of_theta(theta);
    let l = if shape.planar { rho } else { quadrature_arc_length(a, rho) };
    let s = sigma(shape.s[0], shape.s[1], theta);
    let e = (l / s).powi(2);
    (e <= SUPPORT_SIGMAS * SUPPORT_SIGMAS, e)
}

// ----------------------------------------------------------------------
// Ray marching

/// Reference hit of a local ray against the sheet: ray-march the implicit
/// residual for sign changes, refine each by bisection, and return the
/// first root past the near clip that lies inside the support.
pub fn march_intersection(shape: &SurfaceShape, ray: &LocalRay, t_max: f64, step: f64) -> Option<f64> {
    let resid = |t: f64| {
        let p = ray.at(t);
        shape.height(p.x, p.y) - p.z
    };
    let mut roots = Vec::new();
    let mut t0 = T_NEAR_CLIP;
    let mut f0 = resid(t0);
    while t0 < t_max {
        let t1 = (t0 + step).min(t_max);
        let f1 = resid(t1);
        if f0 == 0.0 {
            roots.push(t0);
        } else if f0 * f1 < 0.0 {
            let (mut lo, mut hi, mut flo) = (t0, t1, f0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let fm = resid(mid);
                if fm == 0.0 || hi - lo <= 1e-15 * hi.abs() {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if fm * flo < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    flo = fm;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        t0 = t1;
        f0 = f1;
    }
    roots.into_iter().find(|&t| {
        let p = ray.at(t);
        inside_support(shape, p.x, p.y).0
    })
}

// ----------------------------------------------------------------------
// Differential geometry

/// Unit normal from central differences of the implicit function
/// `F = l1 x^2 + l2 y^2 - z`, oriented to have negative local z.
pub fn fd_normal(shape: &SurfaceShape, x: f64, y: f64, z: f64, h: f64) -> Vector3<f64> {
    let f = |x: f64, y: f64, z: f64| shape.height(x, y) - z;
    let g = Vector3::new(
        (f(x + h, y, z) - f(x - h, y, z)) / (2.0 * h),
        (f(x, y + h, z) - f(x, y - h, z)) / (2.0 * h),
        (f(x, y, z + h) - f(x, y, z - h)) / (2.0 * h),
    )
    .normalize();
    if g.z > 0.0 {
        -g
    } else {
        g
    }
}

/// Gaussian curvature from numerically differentiated first and second
/// fundamental forms of the graph `r(x, y) = (x, y, z(x, y))`.
pub fn fundamental_forms_curvature(shape: &SurfaceShape, x: f64, y: f64, h: f64) -> f64 {
    let r = |x: f64, y: f64| Vector3::new(x, y, shape.height(x, y));
    let rx = (r(x + h, y) - r(x - h, y)) / (2.0 * h);
    let ry = (r(x, y + h) - r(x, y - h)) / (2.0 * h);
    let rxx = (r(x + h, y) - 2.0 * r(x, y) + r(x - h, y)) / (h * h);
    let ryy = (r(x, y + h) - 2.0 * r(x, y) + r(x, y - h)) / (h * h);
    let rxy = (r(x + h, y + h) - r(x + h, y - h) - r(x - h, y + h) + r(x - h, y - h)) / (4.0 * h * h);
    let n = rx.cross(&ry).normalize();
    let (e, f, g) = (rx.dot(&rx), rx.dot(&ry), ry.dot(&ry));
    let (l, m, nn) = (rxx.dot(&n), rxy.dot(&n), ryy.dot(&n));
    (l * nn - m * m) / (e * g - f * f)
}

// ----------------------------------------------------------------------
// Projection

/// Pinhole projection through the homogeneous 3x4 matrix `K [R | t]`.
pub fn project_homogeneous(camera: &Camera, p: &Vector3<f64>) -> Option<(f64, f64)> {
    let m = camera.world_to_camera_matrix();
    let k = camera.intrinsics.matrix();
    let ph = [p.x, p.y, p.z, 1.0];
    let mut pc = [0.0; 3];
    for (r, row) in m.iter().take(3).enumerate() {
        pc[r] = row.iter().zip(ph.iter()).map(|(a, b)| a * b).sum();
    }
    let uvw = k * Vector3::new(pc[0], pc[1], pc[2]);
    if uvw.z <= 0.0 {
        None
    } else {
        Some((uvw.x / uvw.z, uvw.y / uvw.z))
    }
}

/// Samples on-surface local points inside the 3-sigma support by rejection
/// from the azimuthal disk of radius `r_max`.
pub fn sample_support<R: FnMut() -> f64>(shape: &SurfaceShape, r_max: f64, n: usize, mut uniform: R) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 200 * n {
        tries += 1;
        let rho = r_max * uniform().sqrt();
        let theta = std::f64::consts::TAU * uniform();
        let (x, y) = (rho * theta.cos(), rho * theta.sin());
        if inside_support(shape, x, y).0 {
            out.push(Vector3::new(x, y, shape.height(x, y)));
        }
    }
    out
}

// ----------------------------------------------------------------------
// Rendering

/// Maps blended by sorting every fragment of a pixel globally by depth.
#[derive(Clone, Debug)]
pub struct OracleRender {
    pub color: Map,
    pub alpha: Map,
    pub depth_blend: Map,
    pub normal: Map,
    pub distortion: Map,
}

/// Reference renderer: no tiles, no screen boxes, no staging buffer.
pub fn global_sort_render(primitives: &[QuadricPrimitive], camera: &Camera, settings: &RenderSettings) -> OracleRender {
    let prepared = prepare(primitives, camera, settings);
    let (w, h) = (camera.width, camera.height);
    let mut out = OracleRender {
        color: Map::new(w, h, 3),
        alpha: Map::new(w, h, 1),
        depth_blend: Map::new(w, h, 1),
        normal: Map::new(w, h, 3),
        distortion: Map::new(w, h, 1),
    };
    for py in 0..h {
        for px in 0..w {
            let ray = camera.pixel_ray(px, py);
            let mut frags: Vec<(Fragment, usize)> = prepared
                .iter()
                .enumerate()
                .filter_map(|(k, p)| shade(p, 0, &ray.dir, ray.z_scale, settings.density.as_ref()).map(|f| (f, k)))
                .collect();
            frags.sort_by(|a, b| a.0.z.total_cmp(&b.0.z));
            let mut t = 1.0;
            let idx = py * w + px;
            let mut pairs = Vec::new();
            for (f, k) in frags {
                let wgt = f.alpha_bar * t;
                let c = prepared[k].color.rgb;
                for ch in 0..3 {
                    out.color.data[idx * 3 + ch] += wgt * c[ch];
                    out.normal.data[idx * 3 + ch] += wgt * f.normal_cam[ch];
                }
                out.alpha.data[idx] += wgt;
                out.depth_blend.data[idx] += wgt * f.z;
                pairs.push((wgt, f.z));
                t *= 1.0 - f.alpha_bar;
                if t < T_TERMINATE {
                    break;
                }
            }
            for ch in 0..3 {
                out.color.data[idx * 3 + ch] += t * settings.background[ch];
            }
            let mut d = 0.0;
            for i in 0..pairs.len() {
                for j in 0..i {
                    d += pairs[i].0 * pairs[j].0 * (pairs[i].1 - pairs[j].1).powi(2);
                }
            }
            out.distortion.data[idx] = d;
        }
    }
    out
}

// ----------------------------------------------------------------------
// Image metrics

/// SSIM computed pixel by pixel with an explicit 11x11 Gaussian window
/// (sigma 1.5) and zero padding, averaged over pixels and channels.
pub fn reference_ssim(a: &Map, b: &Map) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut win = [[0.0; 11]; 11];
    let mut sum = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            sum += *v;
        }
    }
    let mut total = 0.0;
    for c in 0..a.channels {
        for y in 0..a.height as i64 {
            for x in 0..a.width as i64 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in win.iter().enumerate() {
                    for (j, wv) in row.iter().enumerate() {
                        let (yy, xx) = (y + i as i64 - 5, x + j as i64 - 5);
                        if yy < 0 || xx < 0 || yy >= a.height as i64 || xx >= a.width as i64 {
                            continue;
                        }
                        let wv = wv / sum;
                        let va = a.get(xx as usize, yy as usize, c);
                        let vb = b.get(xx as usize, yy as usize, c);
                        ma += wv * va;
                        mb += wv * vb;
                        saa += wv * va * va;
                        sbb += wv * vb * vb;
                        sab += wv * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    total / (a.data.len() as f64)
}

// ----------------------------------------------------------------------
// Multi-view geometry

/// Plane-induced homography from four projected plane points, solved by
/// the direct linear transform with `H[2][2] = 1`.
pub fn homography_from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Matrix3<f64> {
    let mut m = nalgebra::SMatrix::<f64, 8, 8>::zeros();
    let mut rhs = nalgebra::SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let (x, y) = src[k];
        let (u, v) = dst[k];
        let r = 2 * k;
        m.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        m.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        rhs[r] = u;
        rhs[r + 1] = v;
    }
    let h = m.lu().solve(&rhs).expect("non-degenerate correspondences");
    Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0)
}

// ----------------------------------------------------------------------
// Finite differences

/// Central difference of `f` w.r.t. flat parameter `param` of primitive
/// `prim`, with step `h * max(|p|, 1)`.
pub fn fd_param_gradient(
    f: &dyn Fn(&[QuadricPrimitive]) -> f64,
    primitives: &[QuadricPrimitive],
    prim: usize,
    param: usize,
    h: f64,
) -> f64 {
    let base = primitives[prim].to_params();
    let step = h * base[param].abs().max(1.0);
    let eval = |delta: f64| {
        let mut ps = primitives.to_vec();
        let mut p = base;
        p[param] += delta;
        ps[prim] = QuadricPrimitive::from_params(&p);
        f(&ps)
    };
    (eval(step) - eval(-step)) / (2.0 * step)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

// ----------------------------------------------------------------------
// Gradient-check scenes

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{backward, forward, RenderTargets, TargetGrads};
use crate::intersect::RootKind;
use crate::camera::Intrinsics;
use crate::primitive::NUM_PARAMS;

/// A small random scene with a random linear functional of every render
/// target as its loss.
#[derive(Clone, Debug)]
pub struct GradCheckScene {
    pub primitives: Vec<QuadricPrimitive>,
    pub camera: Camera,
    pub settings: RenderSettings,
    pub upstream: TargetGrads,
}

/// `sum(upstream * target)` over every target.
pub fn linear_loss(t: &RenderTargets, up: &TargetGrads) -> f64 {
    let dot = |a: &Map, b: &Map| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
    dot(&t.color, &up.color)
        + dot(&t.alpha, &up.alpha)
        + dot(&t.depth_blend, &up.depth_blend)
        + dot(&t.depth_median, &up.depth_median)
        + dot(&t.normal, &up.normal)
        + dot(&t.curvature, &up.curvature)
        + dot(&t.distortion, &up.distortion)
}

type Fingerprint = Vec<(Vec<(usize, RootKind, bool)>, Option<usize>)>;

/// Everything that may change discontinuously: per pixel the blended
/// primitives, their root kinds, alpha clamps, and the median index.
fn fingerprint(t: &RenderTargets, camera: &Camera, settings: &RenderSettings) -> Fingerprint {
    let mut out = Vec::with_capacity(camera.num_pixels());
    for py in 0..camera.height {
        for px in 0..camera.width {
            let seq = t
                .trace
                .pixel_fragments(camera, settings, px, py)
                .into_iter()
                .map(|(id, f)| (id, f.root, f.clamped))
                .collect();
            out.push((seq, t.trace.pixel_median(px, py)));
        }
    }
    out
}

pub fn random_gradcheck_scene(seed: u64, n_prims: usize, size: usize) -> GradCheckScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = Camera::look_at(
        "gradcheck",
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        Intrinsics::from_fov(size, size, 0.5),
        size,
        size,
    );
    let mut primitives = Vec::new();
    for _ in 0..n_prims {
        let mut p = QuadricPrimitive::new(Vector3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.6..0.6),
        ));
        let q: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        p.rotation = q;
        for k in 0..2 {
            p.raw_scales[k] = rng.gen_range(-0.5f64..0.4);
            p.raw_signs[k] = rng.gen_range(0.6..2.5) * if rng.gen_bool(0.25) { -1.0 } else { 1.0 };
        }
        p.raw_scales[2] = rng.gen_range(-2.5f64..-0.3);
        p.raw_signs[2] = rng.gen_range(0.6..2.5) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        p.raw_opacity = rng.gen_range(-0.5..1.5);
        for row in p.sh.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-0.25..0.25);
            }
        }
        primitives.push(p);
    }
    let settings = RenderSettings {
        background: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        ..RenderSettings::default()
    };
    let mut upstream = TargetGrads::zeros(size, size);
    for m in [
        &mut upstream.color,
        &mut upstream.alpha,
        &mut upstream.depth_blend,
        &mut upstream.depth_median,
        &mut upstream.normal,
        &mut upstream.curvature,
        &mut upstream.distortion,
    ] {
        for v in m.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    GradCheckScene {
        primitives,
        camera,
        settings,
        upstream,
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub seed: u64,
    pub max_rel: f64,
    /// `(primitive, flat param, analytic, numeric)` at the worst entry.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Compares `backward` with Richardson-extrapolated central differences of
/// the full forward pass (base step `h` relative).
/// Returns `None` when some perturbation changes the fragment structure
/// (the loss is not smooth over the stencil) or a primitive is unseen.
pub fn gradcheck(scene: &GradCheckScene, h: f64, seed: u64) -> Option<GradCheckReport> {
    let GradCheckScene {
        primitives,
        camera,
        settings,
        upstream,
    } = scene;
    let base = forward(primitives, camera, settings);
    let fp = fingerprint(&base, camera, settings);
    for id in 0..primitives.len() {
        let count = fp.iter().filter(|(seq, _)| seq.iter().any(|s| s.0 == id)).count();
        if count < 2 {
            return None;
        }
    }
    let grads = backward(primitives, camera, settings, &base, upstream);
    let mut report = GradCheckReport {
        seed,
        max_rel: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    for (i, prim) in primitives.iter().enumerate() {
        let analytic = grads.params[i].to_array();
        let params = prim.to_params();
        for k in 0..NUM_PARAMS {
            let step = h * params[k].abs().max(1.0);
            // Central differences at h and h/2, Richardson-extrapolated to
            // cancel the O(h^2) truncation term.
            let mut vals = [0.0; 4];
            for (j, delta) in [step, -step, 0.5 * step, -0.5 * step].into_iter().enumerate() {
                let mut ps = primitives.clone();
                let mut p = params;
                p[k] += delta;
                ps[i] = QuadricPrimitive::from_params(&p);
                let t = forward(&ps, camera, settings);
                if fingerprint(&t, camera, settings) != fp {
                    return None;
                }
                vals[j] = linear_loss(&t, upstream);
            }
            let d_h = (vals[0] - vals[1]) / (2.0 * step);
            let d_h2 = (vals[2] - vals[3]) / step;
            let numeric = (4.0 * d_h2 - d_h) / 3.0;
            let rel = relative_error(analytic[k], numeric, 1e-6);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = (i, k, analytic[k], numeric);
            }
        }
    }
    Some(report)
}

/// Draws scenes from `seed` onward until one passes the smoothness screen.
pub fn gradcheck_from_seed(seed: u64, n_prims: usize, size: usize, h: f64) -> GradCheckReport {
    let mut s = seed.wrapping_mul(1_000_003);
    loop {
        let scene = random_gradcheck_scene(s, n_prims, size);
        if let Some(r) = gradcheck(&scene, h, s) {
            return r;
        }
        s += 1;
    }
}
