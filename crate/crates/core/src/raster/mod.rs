//! Tile-binned ray-cast rasterizer with per-pixel resorting.
//!
//! A render goes through four stages:
//!
//! 1. [`prepare`]: per-view constants of each primitive (local camera
//!    origin, activated shape, SH color, screen box).
//! 2. [`bin`]: primitives are listed in every 16x16 tile their box
//!    touches, sorted by a per-tile depth estimate.
//! 3. [`forward`]: every pixel casts its ray through the tile list. Shaded
//!    fragments pass through a small min-depth staging buffer so that
//!    locally misordered fragments are emitted in depth order, and are
//!    then alpha-blended front to back.
//! 4. [`backward`]: the emitted sequence is replayed front to back and
//!    gradients are pushed through blending, the geodesic weight, the
//!    ray/sheet intersection and the activations.

mod backward;
mod bins;
mod forward;
mod fragment;
mod prepare;

use std::fmt;
use std::sync::Arc;

use nalgebra::Vector3;

use crate::bounds::{BoundsStrategy, TightBounds};
use crate::geodesic::{DensityModel, GeodesicDensity};
use crate::maps::Map;
use crate::primitive::NUM_PARAMS;
use crate::sh::MAX_SH_COEFFS;

pub use backward::{alpha_grads_back_to_front, alpha_grads_front_to_back, backward};
pub use bins::{bin, BinEntry, TileBins};
pub use forward::forward;
pub use fragment::{shade, Fragment};
pub use prepare::{prepare, Prepared};

/// Fragments whose blended alpha falls below this are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Upper clamp on a fragment's blended alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Blending stops once transmittance drops below this.
pub const T_TERMINATE: f64 = 1e-4;
/// Default depth of the per-pixel staging buffer.
pub const RESORT_CAPACITY: usize = 8;

#[derive(Clone)]
pub struct RenderSettings {
    pub sh_degree: usize,
    pub background: [f64; 3],
    /// 0 disables resorting (fragments are blended in tile order).
    pub resort_capacity: usize,
    pub density: Arc<dyn DensityModel>,
    pub bounds: Arc<dyn BoundsStrategy>,
    /// Pins `s3` to a constant (the disk ablation); it then gets no gradient.
    pub s3_override: Option<f64>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            sh_degree: 3,
            background: [0.0; 3],
            resort_capacity: RESORT_CAPACITY,
            density: Arc::new(GeodesicDensity),
            bounds: Arc::new(TightBounds),
            s3_override: None,
        }
    }
}

impl fmt::Debug for RenderSettings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RenderSettings")
            .field("sh_degree", &self.sh_degree)
            .field("background", &self.background)
            .field("resort_capacity", &self.resort_capacity)
            .field("density", &self.density.name())
            .field("bounds", &self.bounds.name())
            .field("s3_override", &self.s3_override)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible_primitives: usize,
    pub bin_entries: usize,
    pub fragments: u64,
    /// Times a fragment arrived while the staging buffer was full.
    pub overflow_events: u64,
    /// Emitted fragments that were shallower than their predecessor.
    pub order_violations: u64,
    /// Tile depths that fell back to the primitive center.
    pub depth_fallbacks: usize,
}

/// Per-pixel record of what the forward pass blended, for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub prepared: Vec<Prepared>,
    pub bins: TileBins,
    /// Per tile: pixel offsets into `emitted` (length pixels + 1).
    pub(crate) offsets: Vec<Vec<u32>>,
    /// Per tile: bin positions in blending order.
    pub(crate) emitted: Vec<Vec<u32>>,
    /// Per tile and pixel: index into that pixel's sequence of the median fragment.
    pub(crate) median: Vec<Vec<i32>>,
}

impl ForwardTrace {
    /// Blending sequence of a pixel as primitive ids.
    pub fn pixel_sequence(&self, px: usize, py: usize) -> Vec<usize> {
        let (tile, local) = self.bins.locate(px, py);
        let off = &self.offsets[tile];
        let list = &self.bins.lists[tile];
        self.emitted[tile][off[local] as usize..off[local + 1] as usize]
            .iter()
            .map(|&pos| self.prepared[list[pos as usize].prep as usize].id)
            .collect()
    }

    /// Index into [`Self::pixel_sequence`] of the median fragment.
    pub fn pixel_median(&self, px: usize, py: usize) -> Option<usize> {
        let (tile, local) = self.bins.locate(px, py);
        usize::try_from(self.median[tile][local]).ok()
    }

    /// Re-shades a pixel's blended fragments, paired with primitive ids.
    pub fn pixel_fragments(
        &self,
        camera: &crate::camera::Camera,
        settings: &RenderSettings,
        px: usize,
        py: usize,
    ) -> Vec<(usize, Fragment)> {
        let (tile, local) = self.bins.locate(px, py);
        let off = &self.offsets[tile];
        let list = &self.bins.lists[tile];
        let ray = camera.pixel_ray(px, py);
        self.emitted[tile][off[local] as usize..off[local + 1] as usize]
            .iter()
            .filter_map(|&pos| {
                let prep = &self.prepared[list[pos as usize].prep as usize];
                shade(prep, pos, &ray.dir, ray.z_scale, settings.density.as_ref()).map(|f| (prep.id, f))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RenderTargets {
    pub width: usize,
    pub height: usize,
    pub color: Map,
    pub alpha: Map,
    /// Alpha-weighted camera z-depth (not normalized by alpha).
    pub depth_blend: Map,
    /// Camera z-depth of the last fragment with transmittance above 0.5; 0 if none.
    pub depth_median: Map,
    /// Alpha-weighted camera-frame normal (not normalized).
    pub normal: Map,
    /// Alpha-weighted signed Gaussian curvature.
    pub curvature: Map,
    /// Per-pixel sum over fragment pairs of `w_i w_j (z_i - z_j)^2`.
    pub distortion: Map,
    /// Transmittance left after blending.
    pub transmittance: Map,
    pub stats: RenderStats,
    pub trace: ForwardTrace,
}

/// Upstream gradients w.r.t. every render target. Unused targets stay zero.
#[derive(Clone, Debug)]
pub struct TargetGrads {
    pub color: Map,
    pub alpha: Map,
    pub depth_blend: Map,
    pub depth_median: Map,
    pub normal: Map,
    pub curvature: Map,
    pub distortion: Map,
}

impl TargetGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Map::new(width, height, 3),
            alpha: Map::new(width, height, 1),
            depth_blend: Map::new(width, height, 1),
            depth_median: Map::new(width, height, 1),
            normal: Map::new(width, height, 3),
            curvature: Map::new(width, height, 1),
            distortion: Map::new(width, height, 1),
        }
    }

    pub fn add_assign(&mut self, other: &TargetGrads) {
        self.color.add_assign(&other.color);
        self.alpha.add_assign(&other.alpha);
        self.depth_blend.add_assign(&other.depth_blend);
        self.depth_median.add_assign(&other.depth_median);
        self.normal.add_assign(&other.normal);
        self.curvature.add_assign(&other.curvature);
        self.distortion.add_assign(&other.distortion);
    }
}

/// Gradient of a scalar loss w.r.t. one primitive's raw parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub center: Vector3<f64>,
    pub rotation: [f64; 4],
    pub raw_scales: Vector3<f64>,
    pub raw_signs: Vector3<f64>,
    pub raw_opacity: f64,
    pub sh: [[f64; 3]; MAX_SH_COEFFS],
}

impl Default for ParamGrad {
    fn default() -> Self {
        Self {
            center: Vector3::zeros(),
            rotation: [0.0; 4],
            raw_scales: Vector3::zeros(),
            raw_signs: Vector3::zeros(),
            raw_opacity: 0.0,
            sh: [[0.0; 3]; MAX_SH_COEFFS],
        }
    }
}

impl ParamGrad {
    /// Same layout as [`crate::primitive::QuadricPrimitive::to_params`].
    pub fn to_array(&self) -> [f64; NUM_PARAMS] {
        let mut p = [0.0; NUM_PARAMS];
        p[0..3].copy_from_slice(self.center.as_slice());
        p[3..7].copy_from_slice(&self.rotation);
        p[7..10].copy_from_slice(self.raw_scales.as_slice());
        p[10..13].copy_from_slice(self.raw_signs.as_slice());
        p[13] = self.raw_opacity;
        for (k, row) in self.sh.iter().enumerate() {
            p[14 + 3 * k..17 + 3 * k].copy_from_slice(row);
        }
        p
    }

    pub fn add_assign(&mut self, o: &ParamGrad) {
        self.center += o.center;
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        self.raw_scales += o.raw_scales;
        self.raw_signs += o.raw_signs;
        self.raw_opacity += o.raw_opacity;
        for (a, b) in self.sh.iter_mut().zip(o.sh.iter()) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-primitive gradients of one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientBuffer {
    pub params: Vec<ParamGrad>,
    /// Norm of the center gradient projected to pixel units on this view.
    pub screen_grad: Vec<f64>,
    /// Whether the primitive contributed to at least one pixel.
    pub touched: Vec<bool>,
}

impl GradientBuffer {
    pub fn zeros(n: usize) -> Self {
        Self {
            params: vec![ParamGrad::default(); n],
            screen_grad: vec![0.0; n],
            touched: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}
