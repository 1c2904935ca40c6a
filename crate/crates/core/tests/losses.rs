use approx::assert_relative_eq;
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qgs_core::camera::{Camera, Intrinsics};
use qgs_core::losses::{
    curvature_guidance, curvature_guided_normal_consistency, depth_distortion, multiview, photometric, plane_homography, reprojection_error_map, ssim,
    view_loss, ActiveTerms, LossWeights, MvView,
};
use qgs_core::maps::Map;
use qgs_core::oracles::{homography_from_points, random_gradcheck_scene, reference_ssim, relative_error};
use qgs_core::raster::forward;

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, ch: usize) -> Map {
    let mut m = Map::new(w, h, ch);
    m.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
    m
}

/// Richardson-extrapolated central difference of `f` along entry `i`.
fn fd(f: &dyn Fn(&Map) -> f64, m: &Map, i: usize, h: f64) -> f64 {
    let eval = |d: f64| {
        let mut p = m.clone();
        p.data[i] += d;
        f(&p)
    };
    let d1 = (eval(h) - eval(-h)) / (2.0 * h);
    let d2 = (eval(0.5 * h) - eval(-0.5 * h)) / h;
    (4.0 * d2 - d1) / 3.0
}

#[test]
fn ssim_agrees_with_reference_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..4 {
        let a = random_map(&mut rng, 23, 17, 3);
        let b = random_map(&mut rng, 23, 17, 3);
        let fast = ssim(&a, &b).unwrap().value;
        assert!((fast - reference_ssim(&a, &b)).abs() <= 1e-6);
    }
}

#[test]
fn photometric_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_map(&mut rng, 4, 4, 3);
    let b = random_map(&mut rng, 4, 4, 3);
    let g = photometric(&a, &b, 0.2).unwrap().grad;
    let f = |m: &Map| photometric(m, &b, 0.2).unwrap().value;
    for i in 0..a.data.len() {
        let n = fd(&f, &a, i, 1e-5);
        assert!(relative_error(g.data[i], n, 1e-6) <= 1e-4, "entry {i}: {} vs {n}", g.data[i]);
    }
}

#[test]
fn distortion_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = random_map(&mut rng, 4, 4, 1);
    let g = depth_distortion(&d).grad;
    for i in 0..d.data.len() {
        let n = fd(&|m: &Map| depth_distortion(m).value, &d, i, 1e-4);
        assert!(relative_error(g.data[i], n, 1e-6) <= 1e-4);
    }
}

#[test]
fn normal_consistency_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let nm = random_map(&mut rng, 4, 4, 3);
    let alpha = random_map(&mut rng, 4, 4, 1);
    let k = random_map(&mut rng, 4, 4, 1);
    let target = random_map(&mut rng, 4, 4, 3);
    let mut mask = Map::filled(4, 4, 1, 1.0);
    mask.data[0] = 0.0;
    let r = curvature_guided_normal_consistency(&nm, &alpha, &k, &target, &mask, 1e-6, true).unwrap();
    let fn_ = |m: &Map| curvature_guided_normal_consistency(m, &alpha, &k, &target, &mask, 1e-6, true).unwrap().value;
    let fa = |m: &Map| curvature_guided_normal_consistency(&nm, m, &k, &target, &mask, 1e-6, true).unwrap().value;
    for i in 0..nm.data.len() {
        assert!(relative_error(r.grad_normal.data[i], fd(&fn_, &nm, i, 1e-4), 1e-6) <= 1e-4);
    }
    for i in 0..alpha.data.len() {
        assert!(relative_error(r.grad_alpha.data[i], fd(&fa, &alpha, i, 1e-4), 1e-6) <= 1e-4);
    }
    assert_eq!(r.grad_alpha.data[0], 0.0);
}

#[test]
fn huge_curvature_suppresses_the_normal_term() {
    let nm = Map::new(2, 2, 3);
    let alpha = Map::filled(2, 2, 1, 1.0);
    let target = Map::filled(2, 2, 3, 0.5);
    let mask = Map::filled(2, 2, 1, 1.0);
    let flat = curvature_guided_normal_consistency(&nm, &alpha, &Map::new(2, 2, 1), &target, &mask, 1e-6, true).unwrap();
    let sharp = curvature_guided_normal_consistency(&nm, &alpha, &Map::filled(2, 2, 1, 1e9), &target, &mask, 1e-6, true).unwrap();
    assert!(flat.value > 0.99);
    assert!(sharp.value < 1e-8);
    let off = curvature_guided_normal_consistency(&nm, &alpha, &Map::filled(2, 2, 1, 1e9), &target, &mask, 1e-6, false).unwrap();
    assert_relative_eq!(off.value, 1.0);
}

proptest! {
    #[test]
    fn guidance_is_in_unit_interval_and_decreasing(k in -1e6f64..1e6, dk in 1e-3f64..10.0) {
        let a = curvature_guidance(k, 1e-6);
        prop_assert!(a > 0.0 && a < 1.0);
        prop_assert!(curvature_guidance(k.abs() + dk, 1e-6) < a);
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_map(&mut rng, 6, 5, 3);
        let b = random_map(&mut rng, 6, 5, 3);
        prop_assert!(photometric(&a, &b, 0.2).unwrap().value >= 0.0);
        prop_assert!(depth_distortion(&random_map(&mut rng, 6, 5, 1)).value >= 0.0);
    }
}

// ----------------------------------------------------------------------
// Multi-view on an analytic textured plane

struct PlaneScene {
    cams: [Camera; 2],
    /// Plane `n . X = d` in world coordinates.
    n: Vector3<f64>,
    d: f64,
}

fn plane_scene(w: usize, h: usize) -> PlaneScene {
    let k = Intrinsics {
        fx: 30.0,
        fy: 31.0,
        cx: w as f64 / 2.0 + 0.3,
        cy: h as f64 / 2.0 - 0.2,
    };
    let r0 = Matrix3::identity();
    let r1 = *Rotation3::from_euler_angles(0.02, -0.08, 0.01).matrix();
    let c1 = Vector3::new(0.25, 0.05, 0.0);
    PlaneScene {
        cams: [
            Camera::new("ref", k, r0, Vector3::zeros(), w, h),
            Camera::new("nb", k, r1, -(r1 * c1), w, h),
        ],
        n: Vector3::new(0.15, -0.1, -1.0).normalize(),
        d: Vector3::new(0.15, -0.1, -1.0).normalize().dot(&Vector3::new(0.0, 0.0, 3.0)),
    }
}

fn texture(p: &Vector3<f64>) -> f64 {
    0.5 + 0.25 * (3.0 * p.x).sin() * (2.0 * p.y).cos() + 0.1 * (5.0 * p.y + p.x).sin()
}

struct ViewMaps {
    gray: Map,
    depth: Map,
    alpha: Map,
    normal: Map,
}

/// Exact maps of the plane as seen by `cam`.
fn render_plane(s: &PlaneScene, cam: &Camera) -> ViewMaps {
    let (w, h) = (cam.width, cam.height);
    let mut v = ViewMaps {
        gray: Map::new(w, h, 1),
        depth: Map::new(w, h, 1),
        alpha: Map::filled(w, h, 1, 1.0),
        normal: Map::new(w, h, 3),
    };
    let n_cam = cam.rotation * s.n;
    let origin = cam.center();
    for y in 0..h {
        for x in 0..w {
            let ray = cam.pixel_ray(x, y);
            let t = (s.d - s.n.dot(&origin)) / s.n.dot(&ray.dir);
            let p = origin + ray.dir * t;
            v.gray.set(x, y, 0, texture(&p));
            v.depth.set(x, y, 0, t * ray.z_scale);
            for c in 0..3 {
                v.normal.set(x, y, c, n_cam[c]);
            }
        }
    }
    v
}

fn mv_view<'a>(cam: &'a Camera, m: &'a ViewMaps) -> MvView<'a> {
    MvView {
        camera: cam,
        gray: &m.gray,
        depth_blend: &m.depth,
        alpha: &m.alpha,
        normal: &m.normal,
    }
}

#[test]
fn plane_homography_matches_point_correspondences() {
    let s = plane_scene(40, 32);
    let [r, nb] = &s.cams;
    let n_r = r.rotation * s.n;
    let x_r = r.to_camera(&Vector3::new(0.0, 0.0, 3.0));
    let h = plane_homography(r, nb, &n_r, &x_r).unwrap();
    let mut src = [(0.0, 0.0); 4];
    let mut dst = [(0.0, 0.0); 4];
    for (k, (u, v)) in [(3.0, 4.0), (35.0, 2.0), (30.0, 29.0), (5.0, 27.0)].into_iter().enumerate() {
        let ray = r.ray_through(u, v);
        let t = (s.d - s.n.dot(&r.center())) / s.n.dot(&ray.dir);
        let p = r.center() + ray.dir * t;
        let (pu, pv, _) = nb.project(&p).unwrap();
        src[k] = (u, v);
        dst[k] = (pu, pv);
    }
    let oracle = homography_from_points(&src, &dst);
    assert_relative_eq!(h / h[(2, 2)], oracle, epsilon = 1e-6);
}

#[test]
fn identical_views_give_zero_multiview_loss() {
    let s = plane_scene(20, 16);
    let m = render_plane(&s, &s.cams[0]);
    let v = mv_view(&s.cams[0], &m);
    let l = multiview(&v, &v, 7, true).unwrap();
    assert!(l.valid > 0);
    assert!(l.value.abs() < 1e-9, "{}", l.value);
}

#[test]
fn plane_forward_backward_warp_is_exact() {
    let s = plane_scene(40, 32);
    let mr = render_plane(&s, &s.cams[0]);
    let mn = render_plane(&s, &s.cams[1]);
    let (r, n) = (mv_view(&s.cams[0], &mr), mv_view(&s.cams[1], &mn));
    // With the photometric part detached and constant, the value is the
    // mean reprojection error plus the mean of (1 - NCC).
    let l = multiview(&r, &n, 7, false).unwrap();
    assert!(l.valid > 100, "{}", l.valid);
    assert!(l.value < 0.02, "{}", l.value);
    let err = reprojection_error_map(&r, &n);
    let valid: Vec<f64> = err.data.iter().copied().filter(|e| *e >= 0.0).collect();
    assert!(valid.len() > 500, "{}", valid.len());
    let worst = valid.iter().fold(0.0f64, |a, b| a.max(*b));
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn multiview_gradient_matches_finite_differences() {
    let s = plane_scene(14, 12);
    let mut mr = render_plane(&s, &s.cams[0]);
    let mn = render_plane(&s, &s.cams[1]);
    // Perturb the reference geometry so both terms are active.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in mr.normal.data.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    for v in mr.depth.data.iter_mut() {
        *v *= rng.gen_range(0.97..1.03);
    }
    for v in mr.alpha.data.iter_mut() {
        *v = rng.gen_range(0.8..1.0);
    }
    let detached = multiview(&mv_view(&s.cams[0], &mr), &mv_view(&s.cams[1], &mn), 3, false).unwrap();
    {
        let full = true;
        let l = multiview(&mv_view(&s.cams[0], &mr), &mv_view(&s.cams[1], &mn), 3, full).unwrap();
        assert!(l.valid > 20);
        let eval = |f: &dyn Fn(&mut ViewMaps)| {
            let mut m = ViewMaps {
                gray: mr.gray.clone(),
                depth: mr.depth.clone(),
                alpha: mr.alpha.clone(),
                normal: mr.normal.clone(),
            };
            f(&mut m);
            multiview(&mv_view(&s.cams[0], &m), &mv_view(&s.cams[1], &mn), 3, full).unwrap().value
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for p in (0..14 * 12).step_by(7) {
            let checks: [(f64, Box<dyn Fn(&mut ViewMaps, f64)>); 3] = [
                (l.grad_normal.data[3 * p + 1], Box::new(move |m: &mut ViewMaps, d| m.normal.data[3 * p + 1] += d)),
                (l.grad_depth.data[p], Box::new(move |m: &mut ViewMaps, d| m.depth.data[p] += d)),
                (l.grad_alpha.data[p], Box::new(move |m: &mut ViewMaps, d| m.alpha.data[p] += d)),
            ];
            for (analytic, perturb) in checks.iter() {
                let a = eval(&|m| perturb(m, h));
                let b = eval(&|m| perturb(m, -h));
                let a2 = eval(&|m| perturb(m, 0.5 * h));
                let b2 = eval(&|m| perturb(m, -0.5 * h));
                let n = (4.0 * (a2 - b2) / h - (a - b) / (2.0 * h)) / 3.0;
                worst = worst.max(relative_error(*analytic, n, 1e-6));
            }
        }
        assert!(worst <= 1e-4, "full chain {full}: {worst}");
        assert_eq!(detached.valid, l.valid);
        assert_relative_eq!(detached.value, l.value, epsilon = 1e-15);
        assert!(detached.grad_normal != l.grad_normal);
    }
}

// ----------------------------------------------------------------------
// Combined per-view loss

#[test]
fn view_loss_gradients_match_finite_differences() {
    let scene = random_gradcheck_scene(2, 3, 4);
    let mut t = forward(&scene.primitives, &scene.camera, &scene.settings);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for m in [&mut t.alpha, &mut t.curvature, &mut t.distortion, &mut t.depth_blend] {
        m.data.iter_mut().for_each(|v| *v = rng.gen_range(0.1..1.0));
    }
    t.normal.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    t.color.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
    t.depth_median.data.iter_mut().for_each(|v| *v = 4.0 + rng.gen_range(-0.1..0.1));
    let gt = random_map(&mut rng, 4, 4, 3);
    let weights = LossWeights {
        lambda_d: 3.0,
        lambda_n: 0.7,
        ..LossWeights::default()
    };
    let active = ActiveTerms {
        distortion: true,
        normal: true,
        multiview: false,
    };
    let (comp, g) = view_loss(&t, &gt, &scene.camera, &weights, active, None).unwrap();
    assert!(comp.normal != 0.0 && comp.distortion != 0.0);
    let value = |t: &qgs_core::raster::RenderTargets| {
        let (c, _) = view_loss(t, &gt, &scene.camera, &weights, active, None).unwrap();
        qgs_core::losses::total(&c, &weights)
    };
    type Access = fn(&mut qgs_core::raster::RenderTargets) -> &mut Map;
    // The curvature weight is held fixed like the normal target.
    let fields: [(Access, &Map); 4] = [
        (|t| &mut t.color, &g.color),
        (|t| &mut t.alpha, &g.alpha),
        (|t| &mut t.normal, &g.normal),
        (|t| &mut t.distortion, &g.distortion),
    ];
    for (f, (access, grad)) in fields.into_iter().enumerate() {
        for i in 0..grad.data.len() {
            let h = 1e-5;
            let at = |d: f64| {
                let mut p = t.clone();
                access(&mut p).data[i] += d;
                value(&p)
            };
            let n = (4.0 * (at(0.5 * h) - at(-0.5 * h)) / h - (at(h) - at(-h)) / (2.0 * h)) / 3.0;
            assert!(relative_error(grad.data[i], n, 1e-6) <= 1e-4, "field {f} entry {i}: {} vs {n}", grad.data[i]);
        }
    }
    // Neither the normal target nor the curvature weight is differentiated.
    assert!(g.depth_median.data.iter().all(|v| *v == 0.0));
    assert!(g.curvature.data.iter().all(|v| *v == 0.0));
}
