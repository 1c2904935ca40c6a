//! Analytically ray-traced synthetic scenes with exact depth and normals.
//!
//! Scenes and textures are trait objects looked up by name in
//! [`scene_registry`] and [`texture_registry`]. World space is z-up.
//! Colors are unlit albedo, so every scene is exactly view independent.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use noise::{NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use qgs_core::camera::{Camera, Intrinsics};
use qgs_core::io::{write_float_map, write_png, write_points, SeedPoint};
use qgs_core::maps::Map;
use qgs_core::registry::Registry;

use crate::dataset::{write_cameras, CameraRecord, Dataset, Split, View};
use crate::error::{Result, TrainError};

/// A ray/surface hit. `normal` is unit length and faces the ray origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

pub trait SceneShape: Send + Sync + Debug {
    fn name(&self) -> &'static str;
    /// Nearest hit with `t > 0` along the unit direction `dir`.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit>;
    /// Axis-aligned box enclosing the surface.
    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>);
    /// Length scale of the object used to normalize depth errors.
    fn radius(&self) -> f64;
    /// Camera center and look-at target of view `i` of `n`. `phase` in
    /// `[0, 1)` offsets the sequence so held-out views differ from
    /// training views.
    fn camera_pose(&self, i: usize, n: usize, phase: f64) -> (Vector3<f64>, Vector3<f64>) {
        orbit_pose(i, n, phase, 3.2, 0.15, 1.2)
    }
}

/// Points on a spiral over the elevation band `[el_min, el_max]` at
/// distance `dist` from the origin, looking at the origin.
fn orbit_pose(i: usize, n: usize, phase: f64, dist: f64, el_min: f64, el_max: f64) -> (Vector3<f64>, Vector3<f64>) {
    let golden = PI * (3.0 - 5f64.sqrt());
    let k = i as f64 + phase;
    let frac = (k + 0.5) / n.max(1) as f64;
    // Uniform in sin(elevation) over the band.
    let (s0, s1) = (el_min.sin(), el_max.sin());
    let el = (s0 + (s1 - s0) * frac.fract()).asin();
    let az = golden * k;
    let eye = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * dist;
    (eye, Vector3::zeros())
}

fn face(n: Vector3<f64>, dir: &Vector3<f64>) -> Vector3<f64> {
    if n.dot(dir) > 0.0 {
        -n
    } else {
        n
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sphere {
    pub radius: f64,
}

impl SceneShape for Sphere {
    fn name(&self) -> &'static str {
        "sphere"
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let b = o.dot(d);
        let c = o.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let t = [-b - s, -b + s].into_iter().find(|t| *t > 1e-9)?;
        let point = o + d * t;
        Some(Hit {
            t,
            point,
            normal: face(point / self.radius, d),
        })
    }

    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        (Vector3::repeat(-self.radius), Vector3::repeat(self.radius))
    }

    fn radius(&self) -> f64 {
        self.radius
    }
}

/// Domain of a height-field patch in the xy plane.
#[derive(Debug, Clone, Copy)]
pub enum Footprint {
    Disk(f64),
    Square(f64),
}

impl Footprint {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Footprint::Disk(r) => x * x + y * y <= r * r,
            Footprint::Square(h) => x.abs() <= h && y.abs() <= h,
        }
    }

    fn half(&self) -> f64 {
        match *self {
            Footprint::Disk(r) | Footprint::Square(r) => r,
        }
    }
}

/// Two-sided height field `z = a x^2 + b y^2 + c x + z0` over a footprint.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticPatch {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub z0: f64,
    pub footprint: Footprint,
}

impl QuadraticPatch {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.a * x * x + self.b * y * y + self.c * x + self.z0
    }

    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let qa = self.a * d.x * d.x + self.b * d.y * d.y;
        let qb = 2.0 * self.a * o.x * d.x + 2.0 * self.b * o.y * d.y + self.c * d.x - d.z;
        let qc = self.height(o.x, o.y) - o.z;
        let mut roots = Vec::with_capacity(2);
        if qa.abs() < 1e-12 {
            if qb.abs() > 1e-15 {
                roots.push(-qc / qb);
            }
        } else {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            // Stable form of the two roots.
            let q = -0.5 * (qb + qb.signum() * s);
            roots.push(q / qa);
            if q != 0.0 {
                roots.push(qc / q);
            }
            roots.sort_by(f64::total_cmp);
        }
        roots.into_iter().filter(|t| *t > 1e-9).find_map(|t| {
            let p = o + d * t;
            self.footprint.contains(p.x, p.y).then(|| Hit {
                t,
                point: p,
                normal: face(
                    Vector3::new(-(2.0 * self.a * p.x + self.c), -2.0 * self.b * p.y, 1.0).normalize(),
                    d,
                ),
            })
        })
    }

    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let h = self.footprint.half();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &(x, y) in &[(0.0, 0.0), (h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h), (h, h), (h, -h), (-h, h), (-h, -h)] {
            let z = self.height(x, y);
            lo = lo.min(z);
            hi = hi.max(z);
        }
        (Vector3::new(-h, -h, lo), Vector3::new(h, h, hi))
    }
}

/// Open paraboloid bowl, the natural shape of a single quadric primitive.
#[derive(Debug, Clone, Copy)]
pub struct Dish(pub QuadraticPatch);

impl Default for Dish {
    fn default() -> Self {
        Self(QuadraticPatch {
            a: 0.8,
            b: 0.8,
            c: 0.0,
            z0: -0.3,
            footprint: Footprint::Disk(0.9),
        })
    }
}

impl SceneShape for Dish {
    fn name(&self) -> &'static str {
        "dish"
    }
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        self.0.intersect(o, d)
    }
    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        self.0.bounds()
    }
    fn radius(&self) -> f64 {
        1.0
    }
    fn camera_pose(&self, i: usize, n: usize, phase: f64) -> (Vector3<f64>, Vector3<f64>) {
        orbit_pose(i, n, phase, 3.0, 0.35, 1.35)
    }
}

/// Hyperbolic paraboloid patch with negative Gaussian curvature everywhere.
#[derive(Debug, Clone, Copy)]
pub struct Saddle(pub QuadraticPatch);

impl Default for Saddle {
    fn default() -> Self {
        Self(QuadraticPatch {
            a: 0.5,
            b: -0.5,
            c: 0.0,
            z0: 0.0,
            footprint: Footprint::Square(0.8),
        })
    }
}

impl SceneShape for Saddle {
    fn name(&self) -> &'static str {
        "saddle"
    }
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        self.0.intersect(o, d)
    }
    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        self.0.bounds()
    }
    fn radius(&self) -> f64 {
        1.0
    }
    fn camera_pose(&self, i: usize, n: usize, phase: f64) -> (Vector3<f64>, Vector3<f64>) {
        orbit_pose(i, n, phase, 3.0, 0.35, 1.35)
    }
}

/// Two planar sheets crossing along the y axis at a shallow angle, so
/// their depth order flips inside screen tiles.
#[derive(Debug, Clone, Copy)]
pub struct TwoSheet {
    pub sheets: [QuadraticPatch; 2],
}

impl Default for TwoSheet {
    fn default() -> Self {
        let sheet = |c: f64| QuadraticPatch {
            a: 0.0,
            b: 0.0,
            c,
            z0: 0.0,
            footprint: Footprint::Square(0.9),
        };
        Self {
            sheets: [sheet(0.12), sheet(-0.12)],
        }
    }
}

impl SceneShape for TwoSheet {
    fn name(&self) -> &'static str {
        "two-sheet"
    }
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        self.sheets
            .iter()
            .filter_map(|s| s.intersect(o, d))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }
    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let (a0, a1) = self.sheets[0].bounds();
        let (b0, b1) = self.sheets[1].bounds();
        (a0.inf(&b0), a1.sup(&b1))
    }
    fn radius(&self) -> f64 {
        1.0
    }
    fn camera_pose(&self, i: usize, n: usize, phase: f64) -> (Vector3<f64>, Vector3<f64>) {
        orbit_pose(i, n, phase, 3.0, 0.9, 1.45)
    }
}

/// The inside of an axis-aligned box seen from cameras near its center.
#[derive(Debug, Clone, Copy)]
pub struct BoxRoom {
    pub half: f64,
}

impl SceneShape for BoxRoom {
    fn name(&self) -> &'static str {
        "box_room"
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<(f64, usize)> = None;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                continue;
            }
            let wall = self.half * d[k].signum();
            let t = (wall - o[k]) / d[k];
            if t > 1e-9 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, k));
            }
        }
        let (t, k) = best?;
        let mut n = Vector3::zeros();
        n[k] = -d[k].signum();
        Some(Hit {
            t,
            point: o + d * t,
            normal: n,
        })
    }

    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        (Vector3::repeat(-self.half), Vector3::repeat(self.half))
    }

    fn radius(&self) -> f64 {
        self.half
    }

    fn camera_pose(&self, i: usize, n: usize, phase: f64) -> (Vector3<f64>, Vector3<f64>) {
        let (dir, _) = orbit_pose(i, n, phase, 1.0, -0.4, 0.4);
        let eye = Vector3::new(-dir.y, dir.x, 0.0) * 0.3 * self.half;
        (eye, eye + dir)
    }
}

pub trait Texture: Send + Sync + Debug {
    fn name(&self) -> &'static str;
    /// Albedo in `[0, 1]` at a world point.
    fn color(&self, p: &Vector3<f64>) -> [f64; 3];
}

#[derive(Debug, Clone, Copy)]
pub struct Checker {
    pub period: f64,
    pub colors: [[f64; 3]; 2],
}

impl Default for Checker {
    fn default() -> Self {
        Self {
            period: 0.4,
            colors: [[0.9, 0.85, 0.75], [0.15, 0.25, 0.45]],
        }
    }
}

impl Texture for Checker {
    fn name(&self) -> &'static str {
        "checker"
    }

    fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let cell = |v: f64| (v / self.period).floor() as i64;
        let parity = (cell(p.x) + cell(p.y) + cell(p.z)).rem_euclid(2);
        self.colors[parity as usize]
    }
}

#[derive(Debug, Clone)]
pub struct PerlinTexture {
    noise: Perlin,
    pub frequency: f64,
}

impl Default for PerlinTexture {
    fn default() -> Self {
        Self {
            noise: Perlin::new(7),
            frequency: 2.5,
        }
    }
}

impl Texture for PerlinTexture {
    fn name(&self) -> &'static str {
        "perlin"
    }

    fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let q = p * self.frequency;
        let n = |off: f64| self.noise.get([q.x + off, q.y - off, q.z + 0.5 * off]);
        let v = 0.5 + 0.5 * n(0.0);
        let w = 0.5 + 0.35 * n(17.3);
        [(0.2 + 0.7 * v).clamp(0.0, 1.0), (0.2 + 0.6 * w).clamp(0.0, 1.0), (0.7 - 0.4 * v).clamp(0.0, 1.0)]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Flat(pub [f64; 3]);

impl Texture for Flat {
    fn name(&self) -> &'static str {
        "flat"
    }
    fn color(&self, _p: &Vector3<f64>) -> [f64; 3] {
        self.0
    }
}

pub fn scene_registry() -> Registry<dyn SceneShape> {
    let mut reg: Registry<dyn SceneShape> = Registry::new("scene");
    reg.register("sphere", || Arc::new(Sphere { radius: 1.0 }))
        .register("dish", || Arc::new(Dish::default()))
        .register("saddle", || Arc::new(Saddle::default()))
        .register("box_room", || Arc::new(BoxRoom { half: 2.0 }))
        .register("two-sheet", || Arc::new(TwoSheet::default()));
    reg
}

pub fn texture_registry() -> Registry<dyn Texture> {
    let mut reg: Registry<dyn Texture> = Registry::new("texture");
    reg.register("checker", || Arc::new(Checker::default()))
        .register("perlin", || Arc::new(PerlinTexture::default()))
        .register("flat", || Arc::new(Flat([0.7, 0.55, 0.4])));
    reg
}

/// Exact renders of one view.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Supersampled color, composited over the background.
    pub image: Map,
    /// Supersampled coverage.
    pub alpha: Map,
    /// Camera z-depth through the pixel center, 0 on misses.
    pub depth: Map,
    /// Camera-frame unit normal through the pixel center, 0 on misses.
    pub normal: Map,
}

/// Traces `camera` with `ss x ss` stratified samples per pixel for color
/// and coverage and one center sample for depth and normal.
pub fn render_ground_truth(
    shape: &dyn SceneShape,
    texture: &dyn Texture,
    camera: &Camera,
    background: [f64; 3],
    ss: usize,
) -> GroundTruth {
    let (w, h) = (camera.width, camera.height);
    let ss = ss.max(1);
    let rows: Vec<Vec<[f64; 8]>> = (0..h)
        .into_par_iter()
        .map(|py| {
            (0..w)
                .map(|px| {
                    let mut acc = [0.0; 8];
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let u = px as f64 + (sx as f64 + 0.5) / ss as f64;
                            let v = py as f64 + (sy as f64 + 0.5) / ss as f64;
                            let ray = camera.ray_through(u, v);
                            let c = match shape.intersect(&ray.origin, &ray.dir) {
                                Some(hit) => {
                                    acc[3] += 1.0;
                                    texture.color(&hit.point)
                                }
                                None => background,
                            };
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                    let n = (ss * ss) as f64;
                    for v in acc.iter_mut().take(4) {
                        *v /= n;
                    }
                    let ray = camera.pixel_ray(px, py);
                    if let Some(hit) = shape.intersect(&ray.origin, &ray.dir) {
                        acc[4] = hit.t * ray.z_scale;
                        let nc = camera.rotation * hit.normal;
                        acc[5] = nc.x;
                        acc[6] = nc.y;
                        acc[7] = nc.z;
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let mut gt = GroundTruth {
        image: Map::new(w, h, 3),
        alpha: Map::new(w, h, 1),
        depth: Map::new(w, h, 1),
        normal: Map::new(w, h, 3),
    };
    for (py, row) in rows.iter().enumerate() {
        for (px, a) in row.iter().enumerate() {
            let p = py * w + px;
            gt.image.pixel_mut(p).copy_from_slice(&a[0..3]);
            gt.alpha.data[p] = a[3];
            gt.depth.data[p] = a[4];
            gt.normal.pixel_mut(p).copy_from_slice(&a[5..8]);
        }
    }
    gt
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub scene: String,
    pub texture: String,
    /// Training views; a quarter as many (at least one) are held out.
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Samples per pixel along each axis for color.
    pub supersample: usize,
    /// Seed points written to `points.ply` (0 skips the file).
    pub points: usize,
    pub fov_x: f64,
    pub background: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            scene: "sphere".into(),
            texture: "checker".into(),
            views: 16,
            width: 128,
            height: 128,
            seed: 0,
            supersample: 3,
            points: 1000,
            fov_x: 0.75,
            background: [0.0; 3],
        }
    }
}

impl SynthSpec {
    pub fn test_views(&self) -> usize {
        (self.views / 4).max(1)
    }
}

/// A generated scene in memory.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub shape: Arc<dyn SceneShape>,
    pub cameras: Vec<(Camera, Split)>,
    pub truth: Vec<GroundTruth>,
    pub points: Vec<SeedPoint>,
}

pub fn cameras_for(shape: &dyn SceneShape, spec: &SynthSpec) -> Vec<(Camera, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let intr = Intrinsics::from_fov(spec.width, spec.height, spec.fov_x);
    let mut out = Vec::new();
    let mut add = |i: usize, n: usize, phase: f64, split: Split, rng: &mut ChaCha8Rng| {
        let (eye, target) = shape.camera_pose(i, n, phase);
        let jitter = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 0.02;
        let prefix = if split == Split::Train { "train" } else { "test" };
        let cam = Camera::look_at(
            format!("{prefix}_{i:03}"),
            eye + jitter,
            target,
            Vector3::new(0.0, 0.0, 1.0),
            intr,
            spec.width,
            spec.height,
        );
        out.push((cam, split));
    };
    for i in 0..spec.views {
        add(i, spec.views, 0.0, Split::Train, &mut rng);
    }
    let nt = spec.test_views();
    for i in 0..nt {
        // Half-step offsets in the training spiral.
        add(i, nt, 0.5 * spec.views as f64 / nt as f64 * 0.37, Split::Test, &mut rng);
    }
    out
}

/// Surface points seen from the training cameras, with their albedo.
fn seed_points(shape: &dyn SceneShape, texture: &dyn Texture, cameras: &[(Camera, Split)], n: usize, seed: u64) -> Vec<SeedPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let train: Vec<&Camera> = cameras.iter().filter(|c| c.1 == Split::Train).map(|c| &c.0).collect();
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 50 * n.max(1) && !train.is_empty() {
        tries += 1;
        let cam = train[rng.gen_range(0..train.len())];
        let ray = cam.ray_through(rng.gen_range(0.0..cam.width as f64), rng.gen_range(0.0..cam.height as f64));
        if let Some(hit) = shape.intersect(&ray.origin, &ray.dir) {
            out.push(SeedPoint {
                position: hit.point,
                color: Some(texture.color(&hit.point)),
            });
        }
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<SynthScene> {
    let shape = scene_registry().create(&spec.scene)?;
    let texture = texture_registry().create(&spec.texture)?;
    if spec.views == 0 || spec.width == 0 || spec.height == 0 {
        return Err(TrainError::Dataset("synthetic scenes need at least one view and pixel".into()));
    }
    let cameras = cameras_for(shape.as_ref(), spec);
    let truth = cameras
        .iter()
        .map(|(c, _)| render_ground_truth(shape.as_ref(), texture.as_ref(), c, spec.background, spec.supersample))
        .collect();
    let points = seed_points(shape.as_ref(), texture.as_ref(), &cameras, spec.points, spec.seed);
    Ok(SynthScene {
        shape,
        cameras,
        truth,
        points,
    })
}

impl SynthScene {
    /// The scene as a loaded dataset would see it: colors quantized to
    /// 8 bits as if read back from PNG.
    pub fn to_dataset(&self) -> Dataset {
        let views = self
            .cameras
            .iter()
            .zip(&self.truth)
            .map(|((camera, split), gt)| {
                let mut image = gt.image.clone();
                image.data.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
                View {
                    camera: camera.clone(),
                    image,
                    depth: Some(gt.depth.clone()),
                    split: *split,
                }
            })
            .collect();
        Dataset {
            root: PathBuf::new(),
            views,
            points: (!self.points.is_empty()).then(|| self.points.clone()),
        }
    }
}

/// Writes a scene in the data directory layout, plus `normal/*.f32`
/// camera-frame ground-truth normals.
pub fn write_scene(scene: &SynthScene, out: &Path) -> Result<()> {
    for sub in ["images", "depth", "normal"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| TrainError::io(&d, e))?;
    }
    let mut records = Vec::new();
    for ((cam, split), gt) in scene.cameras.iter().zip(&scene.truth) {
        write_png(&out.join("images").join(format!("{}.png", cam.name)), &gt.image)?;
        write_float_map(&out.join("depth").join(format!("{}.f32", cam.name)), &gt.depth)?;
        write_float_map(&out.join("normal").join(format!("{}.f32", cam.name)), &gt.normal)?;
        records.push(CameraRecord::from_camera(cam, *split));
    }
    write_cameras(&out.join("cameras.json"), &records)?;
    if !scene.points.is_empty() {
        write_points(&out.join("points.ply"), &scene.points)?;
    }
    Ok(())
}
