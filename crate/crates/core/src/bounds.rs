//! Screen-space bounding boxes of a primitive's 3-sigma support.
//!
//! Both strategies start from a local extent of the support: for sampled
//! azimuths the support radius is bounded with the density model's radius
//! solve (for geodesic density the quadratic arc-length under-estimate,
//! whose inverse over-estimates the radius), and the box of those radii
//! and their heights is widened by a small margin.
//!
//! * `loose` projects the 8 corners of that local box.
//! * `tight` intersects the box with the tangent-plane frustum of a bowl:
//!   on `z = l1 x^2 + l2 y^2` with `l1, l2 >= 0`, every point satisfies
//!   `|x| <= X/2 + z / (2 l1 X)`, the tangent line at the rim `x = X`. The
//!   resulting polytope is stacked from slabs between the heights where
//!   those tangent bounds meet the box, and its vertices are projected.
//!   Saddles have no such frustum and fall back to `loose`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::camera::Camera;
use crate::geodesic::{sigma, DensityModel, SUPPORT_SIGMAS};
use crate::primitive::{QuadricPrimitive, SurfaceShape};
use crate::registry::Registry;

pub const TILE_SIZE: usize = 16;
/// Camera-z below which geometry is clipped before projection.
pub const NEAR_Z: f64 = 1e-3;
const AZIMUTH_SAMPLES: usize = 96;
const EXTENT_MARGIN: f64 = 1.01;

/// Inclusive pixel rectangle; empty when `min > max` on either axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScreenBBox {
    pub min_px: [i64; 2],
    pub max_px: [i64; 2],
}

impl ScreenBBox {
    pub const EMPTY: ScreenBBox = ScreenBBox {
        min_px: [0, 0],
        max_px: [-1, -1],
    };

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            min_px: [0, 0],
            max_px: [width as i64 - 1, height as i64 - 1],
        }
    }

    /// Pixels whose centers fall inside the continuous rectangle, clipped
    /// to the image.
    pub fn from_extent(umin: f64, vmin: f64, umax: f64, vmax: f64, width: usize, height: usize) -> Self {
        let clamp = |v: f64, hi: i64| -> i64 {
            if v.is_nan() {
                return 0;
            }
            v.clamp(-1.0, hi as f64 + 1.0) as i64
        };
        let (w, h) = (width as i64, height as i64);
        let min_px = [
            clamp((umin - 0.5).ceil(), w).max(0),
            clamp((vmin - 0.5).ceil(), h).max(0),
        ];
        let max_px = [
            clamp((umax - 0.5).floor(), w).min(w - 1),
            clamp((vmax - 0.5).floor(), h).min(h - 1),
        ];
        let b = Self { min_px, max_px };
        if b.is_empty() {
            Self::EMPTY
        } else {
            b
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min_px[0] > self.max_px[0] || self.min_px[1] > self.max_px[1]
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        let (x, y) = (px as i64, py as i64);
        !self.is_empty() && x >= self.min_px[0] && x <= self.max_px[0] && y >= self.min_px[1] && y <= self.max_px[1]
    }

    pub fn contains_box(&self, other: &ScreenBBox) -> bool {
        other.is_empty()
            || (!self.is_empty()
                && other.min_px[0] >= self.min_px[0]
                && other.min_px[1] >= self.min_px[1]
                && other.max_px[0] <= self.max_px[0]
                && other.max_px[1] <= self.max_px[1])
    }

    pub fn area(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            ((self.max_px[0] - self.min_px[0] + 1) * (self.max_px[1] - self.min_px[1] + 1)) as u64
        }
    }

    /// Inclusive tile index range `(min, max)` on a 16x16 grid.
    pub fn tile_range(&self) -> Option<([usize; 2], [usize; 2])> {
        if self.is_empty() {
            return None;
        }
        let t = TILE_SIZE as i64;
        Some((
            [(self.min_px[0] / t) as usize, (self.min_px[1] / t) as usize],
            [(self.max_px[0] / t) as usize, (self.max_px[1] / t) as usize],
        ))
    }
}

/// Rigid placement and shape of one primitive, as needed for bounds.
#[derive(Clone, Copy, Debug)]
pub struct PlacedShape {
    pub center: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub shape: SurfaceShape,
}

impl PlacedShape {
    pub fn of(prim: &QuadricPrimitive, shape: SurfaceShape) -> Self {
        Self {
            center: prim.center,
            rotation: prim.rotation_matrix(),
            shape,
        }
    }

    fn to_world(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        self.rotation * Vector3::new(x, y, z) + self.center
    }
}

/// Local axis-aligned box enclosing the 3-sigma support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalExtent {
    pub half: [f64; 2],
    pub z_range: [f64; 2],
}

pub fn support_extent(shape: &SurfaceShape, density: &dyn DensityModel) -> LocalExtent {
    let mut half = [0.0f64; 2];
    let (mut zlo, mut zhi) = (0.0f64, 0.0f64);
    // The support is symmetric under x -> -x and y -> -y, so a quadrant suffices.
    for i in 0..=AZIMUTH_SAMPLES {
        let theta = std::f64::consts::FRAC_PI_2 * i as f64 / AZIMUTH_SAMPLES as f64;
        let a = shape.a_of_theta(theta);
        let sig = sigma(shape.s[0], shape.s[1], theta);
        let r = density.support_radius(a, SUPPORT_SIGMAS * sig) * EXTENT_MARGIN;
        let (sn, cs) = theta.sin_cos();
        half[0] = half[0].max(r * cs);
        half[1] = half[1].max(r * sn);
        let z = a * r * r;
        zlo = zlo.min(z);
        zhi = zhi.max(z);
    }
    LocalExtent {
        half,
        z_range: [zlo, zhi],
    }
}

/// Continuous image-plane AABB of a convex hexahedron after clipping
/// against the near plane. Vertices: bottom ring 0..4, top ring 4..8.
fn project_hexahedron(camera: &Camera, v: &[Vector3<f64>; 8], acc: &mut Option<[f64; 4]>) {
    const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 0),
        (4, 5),
        (5, 6),
        (6, 7),
        (7, 4),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];
    let cam: Vec<Vector3<f64>> = v.iter().map(|p| camera.to_camera(p)).collect();
    let k = &camera.intrinsics;
    let mut push = |p: &Vector3<f64>| {
        let u = k.fx * p.x / p.z + k.cx;
        let w = k.fy * p.y / p.z + k.cy;
        let b = acc.get_or_insert([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        b[0] = b[0].min(u);
        b[1] = b[1].min(w);
        b[2] = b[2].max(u);
        b[3] = b[3].max(w);
    };
    for p in &cam {
        if p.z >= NEAR_Z {
            push(p);
        }
    }
    for (a, b) in EDGES {
        let (pa, pb) = (&cam[a], &cam[b]);
        if (pa.z >= NEAR_Z) != (pb.z >= NEAR_Z) {
            let s = (NEAR_Z - pa.z) / (pb.z - pa.z);
            let mut p = pa + (pb - pa) * s;
            p.z = NEAR_Z;
            push(&p);
        }
    }
}

fn extent_to_bbox(acc: Option<[f64; 4]>, camera: &Camera) -> ScreenBBox {
    match acc {
        None => ScreenBBox::EMPTY,
        Some(b) => ScreenBBox::from_extent(b[0], b[1], b[2], b[3], camera.width, camera.height),
    }
}

fn slab(placed: &PlacedShape, lo: (f64, f64, f64), hi: (f64, f64, f64)) -> [Vector3<f64>; 8] {
    let ring = |(hx, hy, z): (f64, f64, f64)| {
        [
            placed.to_world(-hx, -hy, z),
            placed.to_world(hx, -hy, z),
            placed.to_world(hx, hy, z),
            placed.to_world(-hx, hy, z),
        ]
    };
    let (b, t) = (ring(lo), ring(hi));
    [b[0], b[1], b[2], b[3], t[0], t[1], t[2], t[3]]
}

pub fn loose_bbox_placed(placed: &PlacedShape, camera: &Camera, density: &dyn DensityModel) -> ScreenBBox {
    let ext = support_extent(&placed.shape, density);
    let [hx, hy] = ext.half;
    let mut acc = None;
    let verts = slab(placed, (hx, hy, ext.z_range[0]), (hx, hy, ext.z_range[1]));
    project_hexahedron(camera, &verts, &mut acc);
    extent_to_bbox(acc, camera)
}

pub fn tight_bbox_placed(placed: &PlacedShape, camera: &Camera, density: &dyn DensityModel) -> ScreenBBox {
    let shape = &placed.shape;
    if shape.planar || !shape.is_elliptic() || (shape.lambda[0] == 0.0 && shape.lambda[1] == 0.0) {
        return loose_bbox_placed(placed, camera, density);
    }
    let ext = support_extent(shape, density);
    let [hx, hy] = ext.half;
    // Mirror so the bowl opens toward +z'.
    let up = if shape.lambda[0] + shape.lambda[1] >= 0.0 { 1.0 } else { -1.0 };
    let l = [shape.lambda[0].abs(), shape.lambda[1].abs()];
    let h = if up > 0.0 { ext.z_range[1] } else { -ext.z_range[0] };
    let width = |half: f64, lam: f64, z: f64| {
        if lam <= 0.0 {
            half
        } else {
            half.min(0.5 * half + z / (2.0 * lam * half))
        }
    };
    let mut levels = vec![0.0, h];
    for (half, lam) in [(hx, l[0]), (hy, l[1])] {
        let zb = lam * half * half;
        if zb > 0.0 && zb < h {
            levels.push(zb);
        }
    }
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut acc = None;
    for w in levels.windows(2) {
        let lo = (width(hx, l[0], w[0]), width(hy, l[1], w[0]), up * w[0]);
        let hi = (width(hx, l[0], w[1]), width(hy, l[1], w[1]), up * w[1]);
        project_hexahedron(camera, &slab(placed, lo, hi), &mut acc);
    }
    extent_to_bbox(acc, camera)
}

/// Screen-bound strategy, selectable by name.
pub trait BoundsStrategy: Send + Sync + Debug {
    fn name(&self) -> &'static str;
    fn bbox(&self, placed: &PlacedShape, camera: &Camera, density: &dyn DensityModel) -> ScreenBBox;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LooseBounds;

impl BoundsStrategy for LooseBounds {
    fn name(&self) -> &'static str {
        "loose"
    }
    fn bbox(&self, placed: &PlacedShape, camera: &Camera, density: &dyn DensityModel) -> ScreenBBox {
        loose_bbox_placed(placed, camera, density)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct TightBounds;

impl BoundsStrategy for TightBounds {
    fn name(&self) -> &'static str {
        "tight"
    }
    fn bbox(&self, placed: &PlacedShape, camera: &Camera, density: &dyn DensityModel) -> ScreenBBox {
        tight_bbox_placed(placed, camera, density)
    }
}

pub fn bounds_registry() -> Registry<dyn BoundsStrategy> {
    let mut reg: Registry<dyn BoundsStrategy> = Registry::new("bounds strategy");
    reg.register("tight", || Arc::new(TightBounds))
        .register("loose", || Arc::new(LooseBounds));
    reg
}

/// Loose box of a primitive under geodesic density.
pub fn loose_bbox(prim: &QuadricPrimitive, camera: &Camera) -> crate::error::Result<ScreenBBox> {
    let shape = SurfaceShape::new(prim.scales()?.s);
    Ok(loose_bbox_placed(&PlacedShape::of(prim, shape), camera, &crate::geodesic::GeodesicDensity))
}

/// Tight box of a primitive under geodesic density.
pub fn tight_bbox(prim: &QuadricPrimitive, camera: &Camera) -> crate::error::Result<ScreenBBox> {
    let shape = SurfaceShape::new(prim.scales()?.s);
    Ok(tight_bbox_placed(&PlacedShape::of(prim, shape), camera, &crate::geodesic::GeodesicDensity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::geodesic::GeodesicDensity;
    use crate::primitive::{matrix_to_quat, S3_FLAT};

    fn front_camera(dist: f64) -> Camera {
        Camera::look_at(
            "front",
            Vector3::new(0.0, 0.0, -dist),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 64.0,
                cy: 64.0,
            },
            128,
            128,
        )
    }

    fn prim_with_scales(s: [f64; 3]) -> QuadricPrimitive {
        let mut p = QuadricPrimitive::new(Vector3::zeros());
        for k in 0..3 {
            p.raw_scales[k] = s[k].abs().ln();
            p.raw_signs[k] = if s[k] >= 0.0 { 20.0 } else { -20.0 };
        }
        p
    }

    #[test]
    fn fronto_parallel_box_is_symmetric() {
        let cam = front_camera(10.0);
        let p = prim_with_scales([0.5, 0.5, 1e-9]);
        let b = loose_bbox(&p, &cam).unwrap();
        assert!(!b.is_empty());
        assert_eq!(b.min_px[0] + b.max_px[0], 127);
        assert_eq!(b.min_px[1] + b.max_px[1], 127);
        assert_eq!(tight_bbox(&p, &cam).unwrap(), b);
    }

    #[test]
    fn behind_camera_is_empty() {
        let cam = front_camera(10.0);
        let mut p = prim_with_scales([0.5, 0.5, 0.1]);
        p.center = Vector3::new(0.0, 0.0, -20.0);
        assert!(loose_bbox(&p, &cam).unwrap().is_empty());
        assert!(tight_bbox(&p, &cam).unwrap().is_empty());
        assert_eq!(loose_bbox(&p, &cam).unwrap().tile_range(), None);
    }

    #[test]
    fn unit_paraboloid_corners_match_pinhole_projection() {
        // s = (1,1,1) at depth 10 with its axis along the view direction.
        let cam = front_camera(10.0);
        let p = prim_with_scales([1.0, 1.0, 1.0]);
        let placed = PlacedShape::of(&p, SurfaceShape::new([1.0, 1.0, 1.0]));
        let ext = support_extent(&placed.shape, &GeodesicDensity);
        // Pinhole by hand: u = fx * X / Z + cx, with camera z = 10 + local z.
        let near_z = 10.0 + ext.z_range[0];
        let umax = 100.0 * ext.half[0] / near_z + 64.0;
        let b = loose_bbox(&p, &cam).unwrap();
        assert_eq!(b.max_px[0], (umax - 0.5).floor() as i64);
        assert_eq!(b.min_px[0], (128.0 - umax - 0.5).ceil() as i64);
        let tb = tight_bbox(&p, &cam).unwrap();
        assert!(tb.area() <= b.area());
        assert!(b.contains_box(&tb));
    }

    #[test]
    fn planar_tight_equals_loose() {
        let cam = front_camera(6.0);
        let mut p = prim_with_scales([0.7, 0.3, S3_FLAT * 0.5]);
        p.rotation = matrix_to_quat(&nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.5).into_inner());
        assert_eq!(loose_bbox(&p, &cam).unwrap(), tight_bbox(&p, &cam).unwrap());
    }

    #[test]
    fn tile_range_covers_box() {
        let b = ScreenBBox {
            min_px: [15, 16],
            max_px: [33, 47],
        };
        assert_eq!(b.tile_range(), Some(([0, 1], [2, 2])));
    }

    #[test]
    fn registry_resolves_names() {
        let reg = bounds_registry();
        assert_eq!(reg.create("tight").unwrap().name(), "tight");
        assert_eq!(reg.create("loose").unwrap().name(), "loose");
    }
}
