use std::cmp::Ordering;

use crate::bounds::TILE_SIZE;
use crate::camera::Camera;
use crate::intersect::trace;
use crate::primitive::{LocalRay, QuadricPrimitive};

use super::prepare::{prepare, Prepared};
use super::RenderSettings;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinEntry {
    /// Sort depth (camera z) estimated for this tile.
    pub depth: f64,
    /// Index into the prepared list.
    pub prep: u32,
    /// The estimate came from the primitive center because the tile ray missed.
    pub fallback: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TileBins {
    pub width: usize,
    pub height: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Row-major tile lists, each sorted by `(depth, primitive id)`.
    pub lists: Vec<Vec<BinEntry>>,
}

impl TileBins {
    pub fn num_tiles(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Tile index and the pixel's index within the tile.
    pub fn locate(&self, px: usize, py: usize) -> (usize, usize) {
        let (tx, ty) = (px / TILE_SIZE, py / TILE_SIZE);
        let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
        let tw = self.tile_width(tx);
        (ty * self.tiles_x + tx, (py - y0) * tw + (px - x0))
    }

    pub fn tile_width(&self, tx: usize) -> usize {
        TILE_SIZE.min(self.width - tx * TILE_SIZE)
    }

    pub fn tile_height(&self, ty: usize) -> usize {
        TILE_SIZE.min(self.height - ty * TILE_SIZE)
    }

    /// Pixel rectangle `(x0, y0, w, h)` of a tile.
    pub fn tile_rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        (tx * TILE_SIZE, ty * TILE_SIZE, self.tile_width(tx), self.tile_height(ty))
    }
}

/// Depth used to order a primitive inside one tile: the hit depth along
/// the ray through the tile pixel nearest the projected vertex, or the
/// center depth if that ray misses.
fn tile_depth(
    prep: &Prepared,
    camera: &Camera,
    settings: &RenderSettings,
    rect: (usize, usize, usize, usize),
    vertex: Option<(f64, f64)>,
) -> (f64, bool) {
    let (x0, y0, w, h) = rect;
    let Some((u, v)) = vertex else {
        return (prep.center_depth, true);
    };
    let clampi = |c: f64, lo: usize, n: usize| -> usize {
        let c = c.floor();
        if c.is_nan() || c < lo as f64 {
            lo
        } else if c > (lo + n - 1) as f64 {
            lo + n - 1
        } else {
            c as usize
        }
    };
    let (px, py) = (clampi(u, x0, w), clampi(v, y0, h));
    let ray = camera.pixel_ray(px, py);
    let local = LocalRay {
        origin: prep.origin_local,
        dir: prep.rot_t * ray.dir,
    };
    match trace(&prep.shape, &local, settings.density.as_ref()) {
        Some(hit) => (hit.t * ray.z_scale, false),
        None => (prep.center_depth, true),
    }
}

pub(crate) fn bin_prepared(prepared: &[Prepared], camera: &Camera, settings: &RenderSettings) -> TileBins {
    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let tiles_y = camera.height.div_ceil(TILE_SIZE);
    let mut bins = TileBins {
        width: camera.width,
        height: camera.height,
        tiles_x,
        tiles_y,
        lists: vec![Vec::new(); tiles_x * tiles_y],
    };
    for (k, prep) in prepared.iter().enumerate() {
        let Some((tmin, tmax)) = prep.bbox.tile_range() else {
            continue;
        };
        let vertex = camera
            .project(&(camera.center() - prep.offset))
            .map(|(u, v, _)| (u, v));
        for ty in tmin[1]..=tmax[1].min(tiles_y - 1) {
            for tx in tmin[0]..=tmax[0].min(tiles_x - 1) {
                let tile = ty * tiles_x + tx;
                let (depth, fallback) = tile_depth(prep, camera, settings, bins.tile_rect(tile), vertex);
                bins.lists[tile].push(BinEntry {
                    depth,
                    prep: k as u32,
                    fallback,
                });
            }
        }
    }
    for list in &mut bins.lists {
        // Prepared indices ascend with primitive id, so they break ties by id.
        list.sort_by(|a, b| match a.depth.total_cmp(&b.depth) {
            Ordering::Equal => a.prep.cmp(&b.prep),
            o => o,
        });
    }
    bins
}

/// Prepares the primitives for `camera` and bins them into tiles.
pub fn bin(primitives: &[QuadricPrimitive], camera: &Camera, settings: &RenderSettings) -> (Vec<Prepared>, TileBins) {
    let prepared = prepare(primitives, camera, settings);
    let bins = bin_prepared(&prepared, camera, settings);
    (prepared, bins)
}
