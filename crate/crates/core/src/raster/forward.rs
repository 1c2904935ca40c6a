use std::cmp::Ordering;

use rayon::prelude::*;

use crate::camera::Camera;
use crate::maps::Map;
use crate::primitive::QuadricPrimitive;

use super::bins::{bin_prepared, TileBins};
use super::fragment::{shade, Fragment};
use super::prepare::{prepare, Prepared};
use super::{ForwardTrace, RenderSettings, RenderStats, RenderTargets, T_TERMINATE};

/// Blended values of one pixel.
#[derive(Clone, Copy, Debug, Default)]
struct PixelOut {
    color: [f64; 3],
    alpha: f64,
    depth: f64,
    median: f64,
    normal: [f64; 3],
    curvature: f64,
    distortion: f64,
    transmittance: f64,
}

#[derive(Default)]
struct TileOut {
    pixels: Vec<PixelOut>,
    offsets: Vec<u32>,
    emitted: Vec<u32>,
    median: Vec<i32>,
    fragments: u64,
    overflow: u64,
    violations: u64,
}

/// Front-to-back compositor of one pixel.
struct Blender<'a> {
    background: &'a [f64; 3],
    out: PixelOut,
    t: f64,
    // Running sums for the distortion term.
    w: f64,
    m1: f64,
    m2: f64,
    last_z: f64,
    count: i32,
    median: i32,
    done: bool,
    violations: u64,
}

impl<'a> Blender<'a> {
    fn new(background: &'a [f64; 3]) -> Self {
        Self {
            background,
            out: PixelOut::default(),
            t: 1.0,
            w: 0.0,
            m1: 0.0,
            m2: 0.0,
            last_z: f64::NEG_INFINITY,
            count: 0,
            median: -1,
            done: false,
            violations: 0,
        }
    }

    fn emit(&mut self, f: &Fragment, color: &[f64; 3], emitted: &mut Vec<u32>) {
        if self.done {
            return;
        }
        if f.z < self.last_z {
            self.violations += 1;
        }
        self.last_z = f.z;
        let w = f.alpha_bar * self.t;
        if self.t > 0.5 {
            self.median = self.count;
            self.out.median = f.z;
        }
        let o = &mut self.out;
        for c in 0..3 {
            o.color[c] += w * color[c];
            o.normal[c] += w * f.normal_cam[c];
        }
        o.alpha += w;
        o.depth += w * f.z;
        o.curvature += w * f.curvature;
        o.distortion += w * (f.z * f.z * self.w - 2.0 * f.z * self.m1 + self.m2);
        self.w += w;
        self.m1 += w * f.z;
        self.m2 += w * f.z * f.z;
        self.t *= 1.0 - f.alpha_bar;
        self.count += 1;
        emitted.push(f.pos);
        if self.t < T_TERMINATE {
            self.done = true;
        }
    }

    fn finish(mut self) -> (PixelOut, i32, u64) {
        for c in 0..3 {
            self.out.color[c] += self.t * self.background[c];
        }
        self.out.transmittance = self.t;
        (self.out, self.median, self.violations)
    }
}

#[inline]
fn frag_cmp(a: &Fragment, b: &Fragment) -> Ordering {
    a.z.total_cmp(&b.z).then(a.pos.cmp(&b.pos))
}

fn render_tile(
    tile: usize,
    prepared: &[Prepared],
    bins: &TileBins,
    camera: &Camera,
    settings: &RenderSettings,
) -> TileOut {
    let (x0, y0, w, h) = bins.tile_rect(tile);
    let list = &bins.lists[tile];
    let cap = settings.resort_capacity;
    let density = settings.density.as_ref();
    let mut out = TileOut {
        pixels: Vec::with_capacity(w * h),
        offsets: Vec::with_capacity(w * h + 1),
        median: Vec::with_capacity(w * h),
        ..Default::default()
    };
    out.offsets.push(0);
    let mut buffer: Vec<Fragment> = Vec::with_capacity(cap);
    for py in y0..y0 + h {
        for px in x0..x0 + w {
            let ray = camera.pixel_ray(px, py);
            let mut blend = Blender::new(&settings.background);
            buffer.clear();
            let color_of = |f: &Fragment| prepared[list[f.pos as usize].prep as usize].color.rgb;
            for (pos, entry) in list.iter().enumerate() {
                if blend.done {
                    break;
                }
                let prep = &prepared[entry.prep as usize];
                if !prep.bbox.contains(px, py) {
                    continue;
                }
                let Some(frag) = shade(prep, pos as u32, &ray.dir, ray.z_scale, density) else {
                    continue;
                };
                out.fragments += 1;
                if cap == 0 {
                    blend.emit(&frag, &color_of(&frag), &mut out.emitted);
                } else if buffer.len() < cap {
                    buffer.push(frag);
                } else {
                    out.overflow += 1;
                    let (imin, min) = buffer
                        .iter()
                        .enumerate()
                        .min_by(|a, b| frag_cmp(a.1, b.1))
                        .map(|(i, f)| (i, *f))
                        .expect("full buffer");
                    if frag_cmp(&frag, &min) == Ordering::Less {
                        blend.emit(&frag, &color_of(&frag), &mut out.emitted);
                    } else {
                        blend.emit(&min, &color_of(&min), &mut out.emitted);
                        buffer[imin] = frag;
                    }
                }
            }
            buffer.sort_by(frag_cmp);
            for f in &buffer {
                blend.emit(f, &color_of(f), &mut out.emitted);
            }
            let (pix, median, violations) = blend.finish();
            out.violations += violations;
            out.pixels.push(pix);
            out.median.push(median);
            out.offsets.push(out.emitted.len() as u32);
        }
    }
    out
}

pub(crate) fn forward_prepared(
    prepared: Vec<Prepared>,
    bins: TileBins,
    camera: &Camera,
    settings: &RenderSettings,
) -> RenderTargets {
    let (width, height) = (camera.width, camera.height);
    let tiles: Vec<TileOut> = (0..bins.num_tiles())
        .into_par_iter()
        .map(|tile| render_tile(tile, &prepared, &bins, camera, settings))
        .collect();

    let mut color = Map::new(width, height, 3);
    let mut alpha = Map::new(width, height, 1);
    let mut depth_blend = Map::new(width, height, 1);
    let mut depth_median = Map::new(width, height, 1);
    let mut normal = Map::new(width, height, 3);
    let mut curvature = Map::new(width, height, 1);
    let mut distortion = Map::new(width, height, 1);
    let mut transmittance = Map::new(width, height, 1);
    let mut stats = RenderStats {
        visible_primitives: prepared.len(),
        bin_entries: bins.lists.iter().map(Vec::len).sum(),
        depth_fallbacks: bins.lists.iter().flatten().filter(|e| e.fallback).count(),
        ..Default::default()
    };
    let mut trace = ForwardTrace::default();
    for (tile, t) in tiles.into_iter().enumerate() {
        let (x0, y0, w, _) = bins.tile_rect(tile);
        for (i, p) in t.pixels.iter().enumerate() {
            let (px, py) = (x0 + i % w, y0 + i / w);
            let idx = py * width + px;
            color.pixel_mut(idx).copy_from_slice(&p.color);
            normal.pixel_mut(idx).copy_from_slice(&p.normal);
            alpha.data[idx] = p.alpha;
            depth_blend.data[idx] = p.depth;
            depth_median.data[idx] = p.median;
            curvature.data[idx] = p.curvature;
            distortion.data[idx] = p.distortion;
            transmittance.data[idx] = p.transmittance;
        }
        stats.fragments += t.fragments;
        stats.overflow_events += t.overflow;
        stats.order_violations += t.violations;
        trace.offsets.push(t.offsets);
        trace.emitted.push(t.emitted);
        trace.median.push(t.median);
    }
    if stats.order_violations > 0 {
        log::debug!(
            "view `{}`: {} fragments blended out of depth order ({} buffer overflows)",
            camera.name,
            stats.order_violations,
            stats.overflow_events
        );
    }
    trace.prepared = prepared;
    trace.bins = bins;
    RenderTargets {
        width,
        height,
        color,
        alpha,
        depth_blend,
        depth_median,
        normal,
        curvature,
        distortion,
        transmittance,
        stats,
        trace,
    }
}

/// Renders every target for `camera`, keeping the trace needed by `backward`.
pub fn forward(primitives: &[QuadricPrimitive], camera: &Camera, settings: &RenderSettings) -> RenderTargets {
    let prepared = prepare(primitives, camera, settings);
    let bins = bin_prepared(&prepared, camera, settings);
    forward_prepared(prepared, bins, camera, settings)
}
