use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::bounds::{PlacedShape, ScreenBBox};
use crate::camera::Camera;
use crate::primitive::{QuadricPrimitive, SignedScales, SurfaceShape};
use crate::sh::{eval_color, ShColor};

use super::RenderSettings;

/// View-dependent constants of one primitive.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Index into the primitive slice.
    pub id: usize,
    /// Local-to-world rotation `R`.
    pub rot: Matrix3<f64>,
    pub rot_t: Matrix3<f64>,
    /// Camera rotation times `R`: local-to-camera.
    pub rot_cam: Matrix3<f64>,
    /// Camera center minus primitive center (world frame).
    pub offset: Vector3<f64>,
    /// Camera center in the local frame.
    pub origin_local: Vector3<f64>,
    pub scales: SignedScales,
    pub shape: SurfaceShape,
    pub opacity: f64,
    pub color: ShColor,
    /// Unit SH lookup direction (center minus camera) and its length.
    pub sh_dir: Vector3<f64>,
    pub sh_dist: f64,
    pub bbox: ScreenBBox,
    pub center_depth: f64,
}

fn prepare_one(id: usize, prim: &QuadricPrimitive, camera: &Camera, settings: &RenderSettings) -> Option<Prepared> {
    if !prim.is_finite() {
        log::warn!("skipping primitive {id}: non-finite parameters");
        return None;
    }
    let mut scales = prim.scales().ok()?;
    if let Some(s3) = settings.s3_override {
        scales.s[2] = s3;
    }
    let shape = SurfaceShape::new(scales.s);
    let rot = prim.rotation_matrix();
    let placed = PlacedShape {
        center: prim.center,
        rotation: rot,
        shape,
    };
    let bbox = settings.bounds.bbox(&placed, camera, settings.density.as_ref());
    if bbox.is_empty() {
        return None;
    }
    let eye = camera.center();
    let offset = eye - prim.center;
    let sh_dist = offset.norm();
    let sh_dir = if sh_dist > 0.0 {
        -offset / sh_dist
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    let rot_t = rot.transpose();
    Some(Prepared {
        id,
        rot,
        rot_t,
        rot_cam: camera.rotation * rot,
        offset,
        origin_local: rot_t * offset,
        scales,
        shape,
        opacity: prim.opacity(),
        color: eval_color(settings.sh_degree, &prim.sh, &sh_dir),
        sh_dir,
        sh_dist,
        bbox,
        center_depth: camera.to_camera(&prim.center).z,
    })
}

/// Per-view constants for every primitive with a non-empty screen box,
/// in ascending id order.
pub fn prepare(primitives: &[QuadricPrimitive], camera: &Camera, settings: &RenderSettings) -> Vec<Prepared> {
    primitives
        .par_iter()
        .enumerate()
        .filter_map(|(id, p)| prepare_one(id, p, camera, settings))
        .collect()
}
