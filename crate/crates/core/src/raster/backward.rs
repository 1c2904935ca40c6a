use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::primitive::{quat_matrix_vjp, sign_pos, QuadricPrimitive};
use crate::sh::eval_color_backward;

use super::fragment::{fragment_vjp, shade, Fragment, FragmentUpstream};
use super::{GradientBuffer, ParamGrad, RenderSettings, RenderTargets, TargetGrads};

/// Gradient accumulated for one tile-list entry.
#[derive(Clone, Copy, Debug)]
struct Partial {
    /// W.r.t. the camera origin expressed in the local frame.
    origin_local: Vector3<f64>,
    rot: Matrix3<f64>,
    lambda: [f64; 2],
    s12: [f64; 2],
    opacity: f64,
    color: [f64; 3],
    touched: bool,
}

impl Default for Partial {
    fn default() -> Self {
        Self {
            origin_local: Vector3::zeros(),
            rot: Matrix3::zeros(),
            lambda: [0.0; 2],
            s12: [0.0; 2],
            opacity: 0.0,
            color: [0.0; 3],
            touched: false,
        }
    }
}

impl Partial {
    fn add(&mut self, o: &Partial) {
        self.origin_local += o.origin_local;
        self.rot += o.rot;
        for k in 0..2 {
            self.lambda[k] += o.lambda[k];
            self.s12[k] += o.s12[k];
        }
        self.opacity += o.opacity;
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
        self.touched |= o.touched;
    }
}

/// `dL/d alpha_bar_i` for a blended sequence, accumulated front to back.
///
/// `g[i]` is `dL/d w_i` for the blend weight `w_i = alpha_bar_i T_i` and
/// `bg` is the upstream gradient dotted with the background color, which
/// enters with weight `T_N`.
pub fn alpha_grads_front_to_back(alpha_bars: &[f64], g: &[f64], bg: f64) -> Vec<f64> {
    let n = alpha_bars.len();
    let mut t = 1.0;
    let mut weights = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let w = alpha_bars[i] * t;
        weights.push((t, w));
        total += g[i] * w;
        t *= 1.0 - alpha_bars[i];
    }
    let tail_bg = t * bg;
    let mut prefix = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (ti, wi) = weights[i];
        prefix += g[i] * wi;
        out.push(g[i] * ti - (total - prefix + tail_bg) / (1.0 - alpha_bars[i]));
    }
    out
}

/// Same quantity as [`alpha_grads_front_to_back`], accumulated back to front.
pub fn alpha_grads_back_to_front(alpha_bars: &[f64], g: &[f64], bg: f64) -> Vec<f64> {
    let n = alpha_bars.len();
    let mut ts = Vec::with_capacity(n);
    let mut t = 1.0;
    for a in alpha_bars {
        ts.push(t);
        t *= 1.0 - a;
    }
    let mut out = vec![0.0; n];
    // Value blended behind fragment i, per unit of transmittance after it.
    let mut behind = bg;
    for i in (0..n).rev() {
        out[i] = ts[i] * (g[i] - behind);
        behind = alpha_bars[i] * g[i] + (1.0 - alpha_bars[i]) * behind;
    }
    out
}

#[derive(Clone, Copy)]
struct PixelUpstream {
    color: [f64; 3],
    alpha: f64,
    depth: f64,
    median: f64,
    normal: Vector3<f64>,
    curvature: f64,
    distortion: f64,
}

impl PixelUpstream {
    fn at(grads: &TargetGrads, idx: usize) -> Self {
        let c = grads.color.pixel(idx);
        let n = grads.normal.pixel(idx);
        Self {
            color: [c[0], c[1], c[2]],
            alpha: grads.alpha.data[idx],
            depth: grads.depth_blend.data[idx],
            median: grads.depth_median.data[idx],
            normal: Vector3::new(n[0], n[1], n[2]),
            curvature: grads.curvature.data[idx],
            distortion: grads.distortion.data[idx],
        }
    }

    fn is_zero(&self) -> bool {
        self.color == [0.0; 3]
            && self.alpha == 0.0
            && self.depth == 0.0
            && self.median == 0.0
            && self.normal == Vector3::zeros()
            && self.curvature == 0.0
            && self.distortion == 0.0
    }
}

fn backward_tile(
    tile: usize,
    targets: &RenderTargets,
    camera: &Camera,
    settings: &RenderSettings,
    grads: &TargetGrads,
) -> Vec<Partial> {
    let trace = &targets.trace;
    let bins = &trace.bins;
    let list = &bins.lists[tile];
    let mut partials = vec![Partial::default(); list.len()];
    if list.is_empty() {
        return partials;
    }
    let (x0, y0, w, h) = bins.tile_rect(tile);
    let offsets = &trace.offsets[tile];
    let emitted = &trace.emitted[tile];
    let medians = &trace.median[tile];
    let density = settings.density.as_ref();
    let cam_rot_t = camera.rotation.transpose();
    let mut frags: Vec<Fragment> = Vec::new();
    let mut g = Vec::new();
    let mut alpha_bars = Vec::new();
    for ly in 0..h {
        for lx in 0..w {
            let local = ly * w + lx;
            let (px, py) = (x0 + lx, y0 + ly);
            let idx = py * camera.width + px;
            let seq = &emitted[offsets[local] as usize..offsets[local + 1] as usize];
            if seq.is_empty() {
                continue;
            }
            let up = PixelUpstream::at(grads, idx);
            if up.is_zero() {
                continue;
            }
            let ray = camera.pixel_ray(px, py);
            frags.clear();
            for &pos in seq {
                let prep = &trace.prepared[list[pos as usize].prep as usize];
                let f = shade(prep, pos, &ray.dir, ray.z_scale, density)
                    .expect("replayed fragment shades as in the forward pass");
                frags.push(f);
            }
            let color_of = |f: &Fragment| trace.prepared[list[f.pos as usize].prep as usize].color.rgb;

            // Totals for the distortion term.
            let (mut sw, mut m1, mut m2, mut t) = (0.0, 0.0, 0.0, 1.0);
            for f in frags.iter() {
                let wi = f.alpha_bar * t;
                sw += wi;
                m1 += wi * f.z;
                m2 += wi * f.z * f.z;
                t *= 1.0 - f.alpha_bar;
            }
            g.clear();
            alpha_bars.clear();
            for f in frags.iter() {
                let c = color_of(f);
                let e = sw * f.z * f.z - 2.0 * f.z * m1 + m2;
                g.push(
                    up.color[0] * c[0]
                        + up.color[1] * c[1]
                        + up.color[2] * c[2]
                        + up.alpha
                        + up.depth * f.z
                        + up.normal.dot(&f.normal_cam)
                        + up.curvature * f.curvature
                        + up.distortion * e,
                );
                alpha_bars.push(f.alpha_bar);
            }
            let bg = up.color[0] * settings.background[0]
                + up.color[1] * settings.background[1]
                + up.color[2] * settings.background[2];
            let d_alpha = alpha_grads_front_to_back(&alpha_bars, &g, bg);
            let median = medians[local];

            let mut t = 1.0;
            for (i, f) in frags.iter().enumerate() {
                let wi = f.alpha_bar * t;
                t *= 1.0 - f.alpha_bar;
                let prep = &trace.prepared[list[f.pos as usize].prep as usize];
                let part = &mut partials[f.pos as usize];
                part.touched = true;
                for c in 0..3 {
                    part.color[c] += wi * up.color[c];
                }
                let d_ab = if f.clamped { 0.0 } else { d_alpha[i] };
                part.opacity += d_ab * f.weight;
                let mut d_z = wi * up.depth + up.distortion * 2.0 * wi * (f.z * sw - m1);
                if i as i32 == median {
                    d_z += up.median;
                }
                let d_ncam = up.normal * wi;
                // n_cam = flip * (W R) n_local.
                let d_nworld = cam_rot_t * d_ncam * f.flip;
                let fup = FragmentUpstream {
                    weight: d_ab * prep.opacity,
                    z: d_z,
                    n_local: prep.rot_t * d_nworld,
                    curvature: wi * up.curvature,
                };
                let fg = fragment_vjp(prep, f, ray.z_scale, &fup, density);
                part.origin_local += fg.origin_local;
                part.rot += d_nworld * f.n_local.transpose() + ray.dir * fg.dir_local.transpose();
                for k in 0..2 {
                    part.lambda[k] += fg.lambda[k];
                    part.s12[k] += fg.s12[k];
                }
            }
        }
    }
    partials
}

/// Pulls gradients w.r.t. the render targets back to the primitives'
/// raw parameters. `primitives` must be the slice that produced `targets`.
pub fn backward(
    primitives: &[QuadricPrimitive],
    camera: &Camera,
    settings: &RenderSettings,
    targets: &RenderTargets,
    grads: &TargetGrads,
) -> GradientBuffer {
    let trace = &targets.trace;
    let bins = &trace.bins;
    let tiles: Vec<Vec<Partial>> = (0..bins.num_tiles())
        .into_par_iter()
        .map(|tile| backward_tile(tile, targets, camera, settings, grads))
        .collect();

    // Fixed reduction order: tiles in index order, entries in list order.
    let mut per_prep = vec![Partial::default(); trace.prepared.len()];
    for (tile, partials) in tiles.iter().enumerate() {
        for (entry, p) in bins.lists[tile].iter().zip(partials) {
            per_prep[entry.prep as usize].add(p);
        }
    }

    let mut out = GradientBuffer::zeros(primitives.len());
    for (prep, acc) in trace.prepared.iter().zip(&per_prep) {
        if !acc.touched {
            continue;
        }
        let prim = &primitives[prep.id];
        let mut pg = ParamGrad::default();
        let s = prep.scales.s;
        let mut d_s = [acc.s12[0], acc.s12[1], 0.0];
        if !prep.shape.planar {
            for k in 0..2 {
                let lam = prep.shape.lambda[k];
                d_s[k] += acc.lambda[k] * (-2.0 * lam / s[k]);
                d_s[2] += acc.lambda[k] * sign_pos(s[k]) / (s[k] * s[k]);
            }
        }
        if settings.s3_override.is_some() {
            d_s[2] = 0.0;
        }
        for k in 0..3 {
            if k < 2 && prep.scales.clamped[k] {
                continue;
            }
            let th = prim.raw_signs[k].tanh();
            let ex = prim.raw_scales[k].exp();
            pg.raw_scales[k] = d_s[k] * th * ex;
            pg.raw_signs[k] = d_s[k] * (1.0 - th * th) * ex;
        }
        pg.raw_opacity = acc.opacity * prep.opacity * (1.0 - prep.opacity);

        // Local origin o_l = R^T (eye - c).
        let mut d_center = -(prep.rot * acc.origin_local);
        let d_rot = acc.rot + prep.offset * acc.origin_local.transpose();

        let d_dir = eval_color_backward(settings.sh_degree, &prim.sh, &prep.sh_dir, &prep.color, acc.color, &mut pg.sh);
        if prep.sh_dist > 0.0 {
            let n = &prep.sh_dir;
            d_center += (d_dir - n * n.dot(&d_dir)) / prep.sh_dist;
        }
        pg.rotation = quat_matrix_vjp(prim.rotation, &d_rot);
        pg.center = d_center;

        let g_cam = camera.rotation * d_center;
        let z = prep.center_depth.max(1e-6);
        let k = &camera.intrinsics;
        out.screen_grad[prep.id] = ((g_cam.x * z / k.fx).powi(2) + (g_cam.y * z / k.fy).powi(2)).sqrt();
        out.touched[prep.id] = true;
        out.params[prep.id] = pg;
    }
    out
}
