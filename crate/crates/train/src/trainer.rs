//! The fitting loop.

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qgs_core::camera::Camera;
use qgs_core::bounds::bounds_registry;
use qgs_core::geodesic::density_registry;
use qgs_core::io::SeedPoint;
use qgs_core::losses::{total, view_loss, ActiveTerms, LossComponents, LossWeights, MvView};
use qgs_core::maps::Map;
use qgs_core::primitive::{logit, normalize_quat, QuadricPrimitive};
use qgs_core::raster::{backward, forward, RenderSettings, RESORT_CAPACITY};
use qgs_core::sh::{num_coeffs, rgb_to_dc};

use crate::config::TrainConfig;
use crate::dataset::{camera_extent, Dataset, Split, View};
use crate::densify::{densify_and_prune, reset_opacity, DensifyParams, DensifyStats};
use crate::error::{Result, TrainError};
use crate::optimizer::Adam;

/// Opacity ceiling applied by the periodic reset.
const OPACITY_RESET: f64 = 0.01;

/// Renderer settings for a configuration at a given SH degree.
pub fn render_settings(cfg: &TrainConfig, sh_degree: usize) -> Result<RenderSettings> {
    let density = density_registry().create(if cfg.euclidean_density { "euclidean" } else { "geodesic" })?;
    let bounds = bounds_registry().create(&cfg.bounds)?;
    Ok(RenderSettings {
        sh_degree,
        background: cfg.background,
        resort_capacity: if cfg.resort_off { 0 } else { RESORT_CAPACITY },
        density,
        bounds,
        s3_override: cfg.s3_fixed.then_some(cfg.s3_fixed_value),
    })
}

/// Uniformly distributed unit quaternion (Shoemake).
fn random_rotation(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = 2.0 * std::f64::consts::PI;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    normalize_quat([a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos()])
}

fn seeded_primitive(center: Vector3<f64>, scale: f64, color: [f64; 3], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> QuadricPrimitive {
    let mut p = QuadricPrimitive::new(center);
    p.rotation = random_rotation(rng);
    let s = scale.max(1e-7);
    p.raw_scales = Vector3::new(s.ln(), s.ln(), (cfg.init_s3_ratio * s).ln());
    p.raw_signs = Vector3::repeat(cfg.init_sign);
    p.raw_opacity = logit(cfg.init_opacity);
    for c in 0..3 {
        p.sh[0][c] = rgb_to_dc(color[c]);
    }
    p
}

/// Point where the training cameras' optical axes pass closest in the
/// least-squares sense, or the mean camera center if they are parallel.
fn look_center(cameras: &[&Camera]) -> Vector3<f64> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for c in cameras {
        let d = c.rotation.transpose() * Vector3::z();
        let m = Matrix3::identity() - d * d.transpose();
        a += m;
        b += m * c.center();
    }
    a.try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .map(|inv| inv * b)
        .unwrap_or_else(|| cameras.iter().map(|c| c.center()).sum::<Vector3<f64>>() / cameras.len().max(1) as f64)
}

/// Initial primitives: one per seed point (subsampled to
/// `init_primitives`) with a scale from the distance to the three nearest
/// neighbors, or uniform samples in a ball around the cameras' look-at
/// point.
pub fn initialize(cfg: &TrainConfig, cameras: &[&Camera], points: Option<&[SeedPoint]>, rng: &mut ChaCha8Rng) -> Result<Vec<QuadricPrimitive>> {
    let use_points = match cfg.init.as_str() {
        "points" => match points {
            Some(p) if !p.is_empty() => true,
            _ => return Err(TrainError::Dataset("init = points but the data has no points.ply".into())),
        },
        "random" => false,
        _ => points.is_some_and(|p| !p.is_empty()),
    };
    if use_points {
        let mut pts: Vec<&SeedPoint> = points.unwrap_or_default().iter().collect();
        if pts.len() > cfg.init_primitives {
            pts.shuffle(rng);
            pts.truncate(cfg.init_primitives);
        }
        let out = pts
            .iter()
            .map(|p| {
                let mut d: Vec<f64> = pts.iter().map(|q| (q.position - p.position).norm_squared()).filter(|d| *d > 0.0).collect();
                d.sort_by(f64::total_cmp);
                let k = d.len().min(3);
                let scale = if k == 0 { 0.01 } else { d[..k].iter().map(|v| v.sqrt()).sum::<f64>() / k as f64 };
                (p.position, scale, p.color.unwrap_or([0.5; 3]))
            })
            .collect::<Vec<_>>();
        return Ok(out.into_iter().map(|(c, s, col)| seeded_primitive(c, s, col, cfg, rng)).collect());
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(|c| c.center()).collect();
    let radius = 0.5 * camera_extent(&centers);
    let origin = look_center(cameras);
    // Typical spacing of n points in the ball.
    let spacing = radius * (4.0 / cfg.init_primitives as f64).cbrt();
    Ok((0..cfg.init_primitives)
        .map(|_| {
            let v = loop {
                let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if v.norm_squared() <= 1.0 {
                    break v;
                }
            };
            let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            seeded_primitive(origin + v * radius, 0.5 * spacing, color, cfg, rng)
        })
        .collect())
}

/// For each camera, up to `k` others nearest by center distance whose
/// viewing directions differ by at least `min_angle` radians.
pub fn select_neighbors(cameras: &[&Camera], k: usize, min_angle: f64) -> Vec<Vec<usize>> {
    let axis = |c: &Camera| c.rotation.transpose() * Vector3::z();
    (0..cameras.len())
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..cameras.len())
                .filter(|&j| j != i)
                .filter(|&j| axis(cameras[i]).dot(&axis(cameras[j])).clamp(-1.0, 1.0).acos() >= min_angle)
                .map(|j| ((cameras[i].center() - cameras[j].center()).norm(), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Pins `s3` of every primitive to the fixed value so a checkpoint
/// renders the same without the override.
pub fn bake_s3(primitives: &mut [QuadricPrimitive], s3: f64) {
    for p in primitives {
        p.raw_scales[2] = s3.abs().ln();
        p.raw_signs[2] = if s3 >= 0.0 { 20.0 } else { -20.0 };
    }
}

/// One line of training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub components: LossComponents,
    pub primitives: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub log: Vec<LogEntry>,
    /// Primitive updates skipped for non-finite gradients.
    pub skipped_updates: usize,
    pub splits: usize,
    pub clones: usize,
    pub prunes: usize,
    pub resort_overflows: u64,
}

/// Training state. `step` advances one iteration so callers can
/// interleave their own checks.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    views: Vec<&'a View>,
    grays: Vec<Map>,
    neighbors: Vec<Vec<usize>>,
    pub primitives: Vec<QuadricPrimitive>,
    adam: Adam,
    stats: DensifyStats,
    densify: DensifyParams,
    weights: LossWeights,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub iteration: usize,
    pub report: FitReport,
    pub scene_extent: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let views = dataset.split(Split::Train);
        if views.is_empty() {
            return Err(TrainError::Dataset("no training views".into()));
        }
        let cameras: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
        let scene_extent = dataset.scene_extent();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let primitives = initialize(cfg, &cameras, dataset.points.as_deref(), &mut rng)?;
        let neighbors = select_neighbors(&cameras, cfg.mv_neighbors, cfg.mv_min_angle_deg.to_radians());
        let n = primitives.len();
        Ok(Self {
            cfg: cfg.clone(),
            grays: views.iter().map(|v| v.image.to_gray()).collect(),
            views,
            neighbors,
            primitives,
            adam: Adam::from_config(cfg, scene_extent, n),
            stats: DensifyStats::new(n),
            densify: DensifyParams::from_config(cfg, scene_extent),
            weights: cfg.loss_weights(),
            rng,
            order: Vec::new(),
            cursor: 0,
            iteration: 0,
            report: FitReport::default(),
            scene_extent,
        })
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn active_sh_degree(&self) -> usize {
        let steps = if self.cfg.sh_increase_interval == 0 {
            usize::MAX
        } else {
            self.iteration / self.cfg.sh_increase_interval
        };
        steps.min(self.cfg.sh_degree)
    }

    /// Runs one iteration and returns its total loss.
    pub fn step(&mut self) -> Result<f64> {
        self.iteration += 1;
        let it = self.iteration;
        let cfg = self.cfg.clone();
        let cfg = &cfg;
        let settings = render_settings(cfg, self.active_sh_degree())?;
        let vi = self.next_view();
        let view = self.views[vi];
        let camera = &view.camera;
        let targets = forward(&self.primitives, camera, &settings);
        self.report.resort_overflows += targets.stats.overflow_events;

        let use_mv = it >= cfg.mv_from && !cfg.mv_off && self.weights.lambda_mv > 0.0 && !self.neighbors[vi].is_empty();
        let active = ActiveTerms {
            distortion: it >= cfg.distortion_from,
            normal: it >= cfg.normal_from,
            multiview: use_mv,
        };
        let neighbor = use_mv.then(|| {
            let list = &self.neighbors[vi];
            let ni = list[self.rng.gen_range(0..list.len())];
            let nt = forward(&self.primitives, &self.views[ni].camera, &settings);
            (ni, nt)
        });
        let ref_gray = &self.grays[vi];
        let mv_views = neighbor
            .as_ref()
            .map(|(ni, nt)| (MvView::from_render(camera, ref_gray, &targets), MvView::from_render(&self.views[*ni].camera, &self.grays[*ni], nt)));
        let (components, grads) = view_loss(
            &targets,
            &view.image,
            camera,
            &self.weights,
            active,
            mv_views.as_ref().map(|(r, n)| (r, n)),
        )?;
        let loss = total(&components, &self.weights);
        let buf = backward(&self.primitives, camera, &settings, &targets, &grads);

        if it < cfg.densify_until {
            self.stats.accumulate(&buf, camera.width, camera.height);
        }
        let rep = self.adam.step(&mut self.primitives, &buf.params);
        self.report.skipped_updates += rep.skipped.len();

        if it < cfg.densify_until && it % cfg.densify_interval == 0 && it > cfg.densify_from {
            log::debug!(
                "iteration {it}: gradient statistic median {:?} p90 {:?} max {:?}",
                self.stats.quantile(0.5),
                self.stats.quantile(0.9),
                self.stats.quantile(1.0)
            );
            let out = densify_and_prune(&self.primitives, &self.stats, &self.densify, true);
            self.adam.retain(&out.kept);
            self.adam.extend(out.added);
            self.report.splits += out.split;
            self.report.clones += out.cloned;
            self.report.prunes += out.pruned;
            self.primitives = out.primitives;
            self.stats = DensifyStats::new(self.primitives.len());
            log::debug!(
                "iteration {it}: split {} cloned {} pruned {} -> {} primitives",
                out.split,
                out.cloned,
                out.pruned,
                self.primitives.len()
            );
        }
        if cfg.opacity_reset_interval > 0 && it < cfg.densify_until && it % cfg.opacity_reset_interval == 0 {
            reset_opacity(&mut self.primitives, OPACITY_RESET);
            self.adam.reset_opacity();
        }

        if cfg.log_interval > 0 && (it % cfg.log_interval == 0 || it == cfg.iterations) {
            log::info!(
                "iteration {it}: loss {loss:.5} (photo {:.5} dist {:.5} normal {:.5} mv {:.5}) primitives {}",
                components.photometric,
                components.distortion,
                components.normal,
                components.multiview,
                self.primitives.len()
            );
            self.report.log.push(LogEntry {
                iteration: it,
                loss,
                components,
                primitives: self.primitives.len(),
            });
        }
        self.report.iterations = it;
        Ok(loss)
    }

    /// The fitted primitives, with `s3` baked in when it was pinned.
    pub fn finish(mut self) -> (Vec<QuadricPrimitive>, FitReport) {
        if self.cfg.s3_fixed {
            bake_s3(&mut self.primitives, self.cfg.s3_fixed_value);
        }
        (self.primitives, self.report)
    }
}

/// Fits `dataset` with `cfg` for `cfg.iterations` iterations.
pub fn fit(cfg: &TrainConfig, dataset: &Dataset) -> Result<(Vec<QuadricPrimitive>, FitReport)> {
    let mut trainer = Trainer::new(cfg, dataset)?;
    while trainer.iteration < cfg.iterations {
        trainer.step()?;
    }
    Ok(trainer.finish())
}

/// Renderer settings for a finished model (full SH degree of the
/// checkpoint, no training-only overrides).
pub fn inference_settings(cfg: &TrainConfig) -> Result<RenderSettings> {
    let mut s = render_settings(cfg, cfg.sh_degree)?;
    s.s3_override = None;
    Ok(s)
}

/// Highest SH degree whose coefficients are non-zero somewhere.
pub fn used_sh_degree(primitives: &[QuadricPrimitive]) -> usize {
    (0..=3)
        .rev()
        .find(|&d| {
            let lo = if d == 0 { 0 } else { num_coeffs(d - 1) };
            primitives.iter().any(|p| p.sh[lo..num_coeffs(d)].iter().flatten().any(|v| *v != 0.0))
        })
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, write_scene, SynthSpec};

    fn tiny_dataset(dir: &std::path::Path) -> Dataset {
        let spec = SynthSpec {
            views: 4,
            width: 24,
            height: 24,
            points: 60,
            texture: "flat".into(),
            ..SynthSpec::default()
        };
        write_scene(&generate(&spec).unwrap(), dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 30,
            init_primitives: 60,
            densify_from: 5,
            densify_interval: 10,
            distortion_from: 10,
            normal_from: 10,
            mv_from: 20,
            max_primitives: 120,
            log_interval: 10,
            ncc_patch: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fitting_is_deterministic_and_reduces_the_loss() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let cfg = tiny_config();
        let (a, ra) = fit(&cfg, &ds).unwrap();
        let (b, rb) = fit(&cfg, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(a.iter().all(QuadricPrimitive::is_finite));
        assert!(a.len() <= cfg.max_primitives);
        assert_eq!(ra.log.len(), 3);
    }

    #[test]
    fn random_init_fills_a_ball_around_the_look_at_point() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let cams: Vec<&Camera> = ds.split(Split::Train).iter().map(|v| &v.camera).collect();
        let cfg = TrainConfig {
            init: "random".into(),
            init_primitives: 200,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = initialize(&cfg, &cams, None, &mut rng).unwrap();
        assert_eq!(p.len(), 200);
        let c = look_center(&cams);
        assert!(c.norm() < 0.1, "{c:?}");
        let r = 0.5 * ds.scene_extent();
        assert!(p.iter().all(|q| (q.center - c).norm() <= r + 1e-12));
        assert!(initialize(&TrainConfig { init: "points".into(), ..cfg }, &cams, None, &mut rng).is_err());
    }

    #[test]
    fn neighbors_respect_the_angle_floor() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let cams: Vec<&Camera> = ds.views.iter().map(|v| &v.camera).collect();
        let nb = select_neighbors(&cams, 2, 15f64.to_radians());
        for (i, list) in nb.iter().enumerate() {
            assert!(list.len() <= 2 && !list.contains(&i));
        }
        assert!(select_neighbors(&cams, 2, 4.0).iter().all(Vec::is_empty));
    }

    #[test]
    fn baked_s3_matches_the_override() {
        let mut p = vec![QuadricPrimitive::new(Vector3::zeros())];
        bake_s3(&mut p, 0.001);
        assert!((p[0].scales().unwrap().s[2] - 0.001).abs() < 1e-15);
    }
}
