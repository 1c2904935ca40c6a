//! Acceptance report: one line per criterion with the measured values.
//!
//! Criteria 1 to 6 always run at their stated sizes. The fitting criteria
//! (7 to 9) run at a reduced size unless `QGS_ACCEPTANCE_SCALE` is `medium`
//! or `full`. Every size is reported but only full-size runs are asserted.
//!
//! Run with `cargo test --release -p qgs-train --test acceptance -- --nocapture`.
//! `QGS_ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria.

use std::time::Instant;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qgs_core::camera::{Camera, Intrinsics};
use qgs_core::oracles::suites::{bounds_suite, differential_suite, geodesic_suite, intersection_suite};
use qgs_core::oracles::{gradcheck_from_seed, random_gradcheck_scene};
use qgs_core::primitive::{logit, matrix_to_quat, QuadricPrimitive};
use qgs_core::raster::{alpha_grads_back_to_front, alpha_grads_front_to_back, forward, RenderSettings};
use qgs_train::config::TrainConfig;
use qgs_train::experiment::{run_on, RunResult};
use qgs_train::synth::{generate, SynthScene, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scale {
    Reduced,
    Medium,
    Full,
}

impl Scale {
    fn from_env() -> Self {
        match std::env::var("QGS_ACCEPTANCE_SCALE").as_deref() {
            Ok("full") => Scale::Full,
            Ok("medium") => Scale::Medium,
            _ => Scale::Reduced,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Scale::Reduced => "reduced",
            Scale::Medium => "medium",
            Scale::Full => "full",
        }
    }
}

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    /// Whether a failure fails the test.
    binding: bool,
    scale: &'static str,
    detail: String,
}

impl Outcome {
    fn print(&self) {
        let verdict = match (self.pass, self.binding) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (not asserted)",
        };
        println!("criterion {} [{}] {verdict} ({} scale): {}", self.id, self.name, self.scale, self.detail);
    }
}

fn geodesic() -> Outcome {
    let r = geodesic_suite(200);
    Outcome {
        id: 1,
        name: "geodesic",
        pass: r.points == 40_000 && r.max_rel <= 1e-8 && r.max_flat_rel <= 1e-6 && r.seconds < 5.0,
        binding: true,
        scale: "full",
        detail: format!(
            "{} points, max rel {:.2e}, flat limit {:.2e}, {:.2}s",
            r.points, r.max_rel, r.max_flat_rel, r.seconds
        ),
    }
}

fn intersection() -> Outcome {
    let r = intersection_suite(10_000, 1);
    let agree = (r.pairs - r.disagreements) as f64 / r.pairs as f64;
    Outcome {
        id: 2,
        name: "intersection",
        pass: r.disagreements == 0 && r.max_dt <= 1e-6 && r.seam_rel <= 1e-4 && r.seconds < 30.0,
        binding: true,
        scale: "full",
        detail: format!(
            "{} pairs ({} hits), agreement {:.4}%, max |dt| {:.2e}, seam {:.2e}, {:.2}s",
            r.pairs,
            r.hits,
            100.0 * agree,
            r.max_dt,
            r.seam_rel,
            r.seconds
        ),
    }
}

fn differential() -> Outcome {
    let r = differential_suite(10_000, 2);
    Outcome {
        id: 3,
        name: "differential geometry",
        pass: r.max_normal_err <= 1e-6
            && r.max_curvature_rel <= 1e-8
            && r.vertex_elliptic == 4.0
            && r.vertex_hyperbolic == -4.0
            && r.seconds < 5.0,
        binding: true,
        scale: "full",
        detail: format!(
            "{} points, normal {:.2e}, curvature rel {:.2e}, vertex K {} / {}, {:.2}s",
            r.points, r.max_normal_err, r.max_curvature_rel, r.vertex_elliptic, r.vertex_hyperbolic, r.seconds
        ),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        worst = worst.max(gradcheck_from_seed(seed, 3, 4, 1e-4).max_rel);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut blend = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..12);
        let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0 / 255.0..0.99)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bg = rng.gen_range(-1.0..1.0);
        let a = alpha_grads_front_to_back(&alphas, &g, bg);
        let b = alpha_grads_back_to_front(&alphas, &g, bg);
        for (x, y) in a.iter().zip(&b) {
            blend = blend.max((x - y).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 4,
        name: "gradients",
        pass: worst <= 1e-4 && blend <= 1e-12 && secs < 120.0,
        binding: true,
        scale: "full",
        detail: format!("20 scenes, max rel {worst:.2e}, blend identity {blend:.2e}, {secs:.1}s"),
    }
}

/// Two planar sheets `z = +-slope (x - CROSS_X)` crossing inside a tile
/// column, tiled with overlapping opaque disks.
const CROSS_X: f64 = 0.1;

fn crossing_sheets(slope: f64) -> Vec<QuadricPrimitive> {
    let mut out = Vec::new();
    for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
        let n = Vector3::new(-sign * slope, 0.0, 1.0).normalize();
        let rot = Rotation3::rotation_between(&Vector3::z(), &n).expect("not antiparallel");
        for i in 0..9 {
            for j in 0..9 {
                let (x, y) = (-1.0 + 0.25 * i as f64, -1.0 + 0.25 * j as f64);
                let mut p = QuadricPrimitive::new(Vector3::new(x, y, sign * slope * (x - CROSS_X)));
                p.rotation = matrix_to_quat(rot.matrix());
                p.raw_scales = Vector3::new(0.18f64.ln(), 0.18f64.ln(), -20.0);
                p.raw_signs = Vector3::new(5.0, 5.0, 5.0);
                p.raw_opacity = logit(0.95);
                p.sh[0] = if k == 0 { [1.0, -1.0, -1.0] } else { [-1.0, -1.0, 1.0] };
                out.push(p);
            }
        }
    }
    out
}

/// Mean angle in degrees between rendered normals and the nearer sheet's
/// normal, ignoring orientation, over pixels well inside both sheets.
fn crossing_normal_error(camera: &Camera, settings: &RenderSettings, prims: &[QuadricPrimitive], slope: f64) -> f64 {
    let t = forward(prims, camera, settings);
    let (mut sum, mut n) = (0.0, 0usize);
    for py in 0..camera.height {
        for px in 0..camera.width {
            let idx = py * camera.width + px;
            if t.alpha.data[idx] < 0.5 {
                continue;
            }
            let ray = camera.pixel_ray(px, py);
            let mut best: Option<(f64, Vector3<f64>)> = None;
            let mut inside = true;
            for sign in [1.0, -1.0] {
                // Plane z - sign * slope * (x - CROSS_X) = 0.
                let nrm = Vector3::new(-sign * slope, 0.0, 1.0);
                let s = -(nrm.dot(&ray.origin) + sign * slope * CROSS_X) / nrm.dot(&ray.dir);
                let hit = ray.origin + ray.dir * s;
                inside &= hit.x.abs() <= 0.8 && hit.y.abs() <= 0.8;
                if best.is_none_or(|b| s < b.0) {
                    best = Some((s, nrm.normalize()));
                }
            }
            if !inside {
                continue;
            }
            let gt = camera.rotation * best.expect("two planes").1;
            let p = Vector3::new(t.normal.data[3 * idx], t.normal.data[3 * idx + 1], t.normal.data[3 * idx + 2]);
            if p.norm() == 0.0 {
                continue;
            }
            sum += (p.normalize().dot(&gt).abs().min(1.0)).acos().to_degrees();
            n += 1;
        }
    }
    assert!(n > 100, "crossing scene covers too few pixels");
    sum / n as f64
}

fn ordering() -> Outcome {
    let mut identical = true;
    for seed in 0..10 {
        let scene = random_gradcheck_scene(1000 + seed, 40, 32);
        let t = forward(&scene.primitives, &scene.camera, &scene.settings);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = scene.primitives.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let s = forward(&shuffled, &scene.camera, &scene.settings);
        identical &= s.color == t.color
            && s.alpha == t.alpha
            && s.depth_blend == t.depth_blend
            && s.depth_median == t.depth_median
            && s.normal == t.normal
            && s.curvature == t.curvature
            && s.distortion == t.distortion;
    }
    let slope = 0.35;
    let camera = Camera::look_at(
        "crossing",
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        Intrinsics::from_fov(64, 64, 0.6),
        64,
        64,
    );
    let prims = crossing_sheets(slope);
    let on = RenderSettings::default();
    let off = RenderSettings {
        resort_capacity: 0,
        ..RenderSettings::default()
    };
    let e_on = crossing_normal_error(&camera, &on, &prims, slope);
    let e_off = crossing_normal_error(&camera, &off, &prims, slope);
    Outcome {
        id: 5,
        name: "ordering",
        pass: identical && e_on < e_off,
        binding: true,
        scale: "full",
        detail: format!(
            "permutations bit-identical: {identical}; crossing sheets normal error {e_on:.3} deg with resort, {e_off:.3} deg without"
        ),
    }
}

fn bounds() -> Outcome {
    let r = bounds_suite(100, 1000, 6);
    Outcome {
        id: 6,
        name: "bounds",
        pass: r.escaped == 0 && r.tight_not_in_loose == 0 && r.seconds < 60.0,
        binding: true,
        scale: "full",
        detail: format!(
            "{} rays over {} configurations ({} in support), {} outside tight box, {} tight boxes not in loose, {:.1}s",
            r.rays, r.configurations, r.supported, r.escaped, r.tight_not_in_loose, r.seconds
        ),
    }
}

/// Sizes of the fitting experiments.
#[derive(Clone, Copy, Debug)]
struct FitSize {
    res: usize,
    views: usize,
    iterations: usize,
    max_primitives: usize,
    seeds: u64,
}

impl FitSize {
    fn config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig {
            seed,
            iterations: self.iterations,
            max_primitives: self.max_primitives,
            init_primitives: self.max_primitives / 2,
            log_interval: 0,
            ..TrainConfig::default()
        };
        // Keep the schedule proportional to the run length.
        let f = self.iterations as f64 / 7000.0;
        let at = |it: usize| ((it as f64 * f).round() as usize).max(1);
        cfg.densify_from = at(500);
        cfg.densify_interval = at(100);
        cfg.sh_increase_interval = at(1000);
        cfg.distortion_from = at(3000);
        cfg.normal_from = at(3000);
        cfg.mv_from = at(7000);
        cfg.opacity_reset_interval = at(3000);
        cfg
    }

    fn scene(&self, name: &str, seed: u64) -> SynthScene {
        let spec = SynthSpec {
            scene: name.into(),
            views: self.views,
            width: self.res,
            height: self.res,
            seed,
            points: self.max_primitives,
            ..SynthSpec::default()
        };
        generate(&spec).expect("known scene")
    }
}

fn end_to_end(scale: Scale) -> Outcome {
    let size = match scale {
        Scale::Full => FitSize {
            res: 128,
            views: 16,
            iterations: 7000,
            max_primitives: 2000,
            seeds: 1,
        },
        Scale::Medium => FitSize {
            res: 96,
            views: 16,
            iterations: 3000,
            max_primitives: 1200,
            seeds: 1,
        },
        Scale::Reduced => FitSize {
            res: 64,
            views: 16,
            iterations: 1500,
            max_primitives: 800,
            seeds: 1,
        },
    };
    let scene = size.scene("sphere", 0);
    let cfg = size.config(0);
    let a = run_on(&scene, &cfg).expect("fit");
    // Determinism on a short prefix of the same run.
    let short = TrainConfig {
        iterations: cfg.densify_from + 2 * cfg.densify_interval,
        ..cfg.clone()
    };
    let p = run_on(&scene, &short).expect("fit");
    let q = run_on(&scene, &short).expect("fit");
    let deterministic = p.primitives == q.primitives && p.metrics == q.metrics;
    let m = &a.metrics;
    let (mae, nd) = (m.depth_mae.unwrap_or(f64::INFINITY), m.normal_deg.unwrap_or(f64::INFINITY));
    // The sphere has radius 1.
    let pass = m.psnr >= 30.0 && mae <= 0.01 && nd <= 5.0 && deterministic;
    Outcome {
        id: 7,
        name: "end to end",
        pass,
        binding: scale == Scale::Full,
        scale: scale.label(),
        detail: format!(
            "{}x{} sphere, {} views, {} iterations, {} primitives: PSNR {:.2} dB, SSIM {:.4}, depth MAE {:.4}, normal {:.2} deg, deterministic {}, {:.0}s",
            size.res,
            size.res,
            size.views,
            size.iterations,
            a.primitives.len(),
            m.psnr,
            m.ssim,
            mae,
            nd,
            deterministic,
            a.seconds
        ),
    }
}

fn ablation_size(scale: Scale) -> FitSize {
    match scale {
        Scale::Full => FitSize {
            res: 128,
            views: 16,
            iterations: 7000,
            max_primitives: 2000,
            seeds: 5,
        },
        Scale::Medium => FitSize {
            res: 64,
            views: 16,
            iterations: 2000,
            max_primitives: 800,
            seeds: 5,
        },
        Scale::Reduced => FitSize {
            res: 48,
            views: 12,
            iterations: 600,
            max_primitives: 300,
            seeds: 5,
        },
    }
}

fn variant(base: &TrainConfig, key: &str) -> TrainConfig {
    let mut c = base.clone();
    c.set(key, "true").expect("known switch");
    c
}

fn ablations(scale: Scale) -> Outcome {
    let size = ablation_size(scale);
    let start = Instant::now();
    let (mut wins_euclid, mut wins_disk) = (0, 0);
    let mut rmse = [0.0f64; 3];
    let mut saddle = [0.0f64; 2];
    for seed in 0..size.seeds {
        let dish = size.scene("dish", seed);
        let base = size.config(seed);
        let runs: Vec<RunResult> = [base.clone(), variant(&base, "euclidean_density"), variant(&base, "s3_fixed")]
            .iter()
            .map(|c| run_on(&dish, c).expect("fit"))
            .collect();
        let r: Vec<f64> = runs.iter().map(|r| r.metrics.depth_rmse.unwrap_or(f64::INFINITY)).collect();
        wins_euclid += usize::from(r[0] < r[1]);
        wins_disk += usize::from(r[0] < r[2]);
        for k in 0..3 {
            rmse[k] += r[k] / size.seeds as f64;
        }
        let sad = size.scene("saddle", seed);
        for (k, c) in [base.clone(), variant(&base, "lambdaK_off")].iter().enumerate() {
            let r = run_on(&sad, c).expect("fit");
            saddle[k] += r.metrics.normal_deg.unwrap_or(f64::INFINITY) / size.seeds as f64;
        }
    }
    let n = size.seeds as usize;
    let pass = rmse[0] < rmse[1] && rmse[0] < rmse[2] && saddle[1] >= saddle[0];
    Outcome {
        id: 8,
        name: "ablations",
        pass,
        binding: scale == Scale::Full,
        scale: scale.label(),
        detail: format!(
            "{} seeds at {}x{}, {} iterations: dish depth RMSE full {:.4} / euclidean {:.4} / s3_fixed {:.4} (full lower in {}/{n} and {}/{n} seeds individually); saddle normal error full {:.2} deg, lambdaK_off {:.2} deg; {:.0}s",
            size.seeds,
            size.res,
            size.res,
            size.iterations,
            rmse[0],
            rmse[1],
            rmse[2],
            wins_euclid,
            wins_disk,
            saddle[0],
            saddle[1],
            start.elapsed().as_secs_f64()
        ),
    }
}

/// Smallest primitive budget reaching `target` PSNR, interpolating
/// linearly between the swept budgets. `None` if no budget reaches it.
fn budget_for(curve: &[(usize, f64)], target: f64) -> Option<f64> {
    if curve[0].1 >= target {
        return Some(curve[0].0 as f64);
    }
    curve.windows(2).find(|w| w[1].1 >= target).map(|w| {
        let ((b0, p0), (b1, p1)) = (w[0], w[1]);
        b0 as f64 + (target - p0) / (p1 - p0) * (b1 - b0) as f64
    })
}

fn efficiency(scale: Scale) -> Outcome {
    let size = ablation_size(scale);
    let start = Instant::now();
    let budgets: Vec<usize> = [0.25, 0.5, 0.75, 1.0].iter().map(|f| (f * size.max_primitives as f64) as usize).collect();
    let mut ratios = Vec::new();
    let mut targets = Vec::new();
    for seed in 0..size.seeds {
        let dish = size.scene("dish", seed);
        let sweep = |disk: bool| -> Vec<(usize, f64)> {
            budgets
                .iter()
                .map(|&b| {
                    let s = FitSize { max_primitives: b, ..size };
                    let mut cfg = s.config(seed);
                    cfg.s3_fixed = disk;
                    // Counts are what is compared, so every primitive starts in place.
                    cfg.init_primitives = b;
                    let r = run_on(&dish, &cfg).expect("fit");
                    (r.primitives.len().max(1), r.metrics.psnr)
                })
                .collect()
        };
        let quad = sweep(false);
        let disk = sweep(true);
        // The PSNR the disk model reaches with its largest budget.
        let target = disk.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        targets.push(target);
        let disk_budget = budget_for(&disk, target).expect("reaches its own best");
        if let Some(q) = budget_for(&quad, target) {
            ratios.push(q / disk_budget);
        } else {
            ratios.push(f64::INFINITY);
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    Outcome {
        id: 9,
        name: "efficiency",
        pass: median <= 0.7,
        binding: scale == Scale::Full,
        scale: scale.label(),
        detail: format!(
            "{} seeds at {}x{}, budgets {:?}: primitive ratio quadric / s3_fixed at the disk model's best PSNR (targets {:?}) median {:.3}, all {:?}; {:.0}s",
            size.seeds,
            size.res,
            size.res,
            budgets,
            targets.iter().map(|t| format!("{t:.2}")).collect::<Vec<_>>(),
            median,
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        ),
    }
}

#[test]
fn acceptance_report() {
    let scale = Scale::from_env();
    let checks: Vec<Box<dyn Fn() -> Outcome>> = vec![
        Box::new(geodesic),
        Box::new(intersection),
        Box::new(differential),
        Box::new(gradients),
        Box::new(ordering),
        Box::new(bounds),
        Box::new(move || end_to_end(scale)),
        Box::new(move || ablations(scale)),
        Box::new(move || efficiency(scale)),
    ];
    let only: Option<Vec<u32>> = std::env::var("QGS_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, check) in checks.into_iter().enumerate() {
        let id = i as u32 + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("criterion {id} skipped");
            continue;
        }
        let o = check();
        o.print();
        if !o.pass && o.binding {
            failed.push(o.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
