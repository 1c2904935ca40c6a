//! Training objectives and their gradients w.r.t. the render targets.
//!
//! Every loss returns its value together with the gradient maps it feeds
//! into [`TargetGrads`]; the rasterizer's backward pass does the rest.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::dual::Dual;
use crate::error::{QgsError, Result};
use crate::maps::Map;
use crate::raster::{RenderTargets, TargetGrads};

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
/// Planes through the camera center (|n . X| below this) are skipped.
pub const PLANE_DEGENERATE: f64 = 1e-6;
/// Alpha above which a pixel counts as covered.
pub const COVERED_ALPHA: f64 = 0.5;
/// Patches with less intensity variance than this have no defined NCC.
const NCC_MIN_VARIANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// D-SSIM share of the photometric loss.
    pub lambda_dssim: f64,
    pub lambda_d: f64,
    /// Near plane of the normalized depth `1 - near / z` on which `lambda_d`
    /// is calibrated; 0 uses camera depth directly.
    pub distortion_near: f64,
    pub lambda_n: f64,
    pub lambda_mv: f64,
    pub eps_k: f64,
    /// `false` replaces the curvature guidance weight with 1.
    pub curvature_guidance: bool,
    /// `false` stops the NCC term's gradient through the homography.
    pub mv_full_chain: bool,
    pub ncc_patch: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            lambda_d: 1000.0,
            distortion_near: 0.2,
            lambda_n: 0.05,
            lambda_mv: 0.05,
            eps_k: 1e-6,
            curvature_guidance: true,
            mv_full_chain: true,
            ncc_patch: 7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("lambda_dssim", self.lambda_dssim),
            ("lambda_d", self.lambda_d),
            ("distortion_near", self.distortion_near),
            ("lambda_n", self.lambda_n),
            ("lambda_mv", self.lambda_mv),
            ("eps_k", self.eps_k),
        ];
        for (name, v) in vals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(QgsError::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_dssim > 1.0 {
            return Err(QgsError::InvalidParameter(format!(
                "lambda_dssim must lie in [0, 1], got {}",
                self.lambda_dssim
            )));
        }
        if self.ncc_patch == 0 || self.ncc_patch % 2 == 0 {
            return Err(QgsError::InvalidParameter(format!(
                "ncc_patch must be odd and positive, got {}",
                self.ncc_patch
            )));
        }
        Ok(())
    }
}

/// A scalar loss with its gradient w.r.t. one map.
#[derive(Clone, Debug)]
pub struct MapLoss {
    pub value: f64,
    pub grad: Map,
}

// ----------------------------------------------------------------------
// Photometric

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable zero-padded Gaussian blur of a single-channel plane.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as i64 + i as i64 - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as i64 + i as i64 - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, zero padding) over pixels
/// and channels, with its gradient w.r.t. `a`.
pub fn ssim(a: &Map, b: &Map) -> Result<MapLoss> {
    a.check_same_shape(b)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let k = gaussian_kernel();
    let n = a.data.len() as f64;
    let mut grad = Map::new(w, h, ch);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = a.data.iter().skip(c).step_by(ch).copied().collect();
        let pb: Vec<f64> = b.data.iter().skip(c).step_by(ch).copied().collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let ma = blur(&pa, w, h, &k);
        let mb = blur(&pb, w, h, &k);
        let eaa = blur(&sq(&pa, &pa), w, h, &k);
        let ebb = blur(&sq(&pb, &pb), w, h, &k);
        let eab = blur(&sq(&pa, &pb), w, h, &k);
        let mut d_ma = vec![0.0; w * h];
        let mut d_eaa = vec![0.0; w * h];
        let mut d_eab = vec![0.0; w * h];
        for i in 0..w * h {
            let (mu_a, mu_b) = (ma[i], mb[i]);
            let saa = eaa[i] - mu_a * mu_a;
            let sbb = ebb[i] - mu_b * mu_b;
            let sab = eab[i] - mu_a * mu_b;
            let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
            let a2 = 2.0 * sab + SSIM_C2;
            let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
            let b2 = saa + sbb + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            d_ma[i] = (2.0 * mu_b * a2 - 2.0 * mu_b * a1) / (b1 * b2) - s * (2.0 * mu_a / b1 - 2.0 * mu_a / b2);
            d_eaa[i] = -s / b2;
            d_eab[i] = 2.0 * a1 / (b1 * b2);
        }
        // The zero-padded symmetric blur is self-adjoint.
        let g_ma = blur(&d_ma, w, h, &k);
        let g_eaa = blur(&d_eaa, w, h, &k);
        let g_eab = blur(&d_eab, w, h, &k);
        for i in 0..w * h {
            grad.data[i * ch + c] = (g_ma[i] + 2.0 * pa[i] * g_eaa[i] + pb[i] * g_eab[i]) / n;
        }
    }
    Ok(MapLoss { value: total / n, grad })
}

/// Mean absolute error with its (sub)gradient w.r.t. `a`.
pub fn l1(a: &Map, b: &Map) -> Result<MapLoss> {
    a.check_same_shape(b)?;
    let n = a.data.len() as f64;
    let mut grad = Map::new(a.width, a.height, a.channels);
    let mut total = 0.0;
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        let d = x - y;
        total += d.abs();
        grad.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(MapLoss { value: total / n, grad })
}

/// `(1 - l) L1 + l (1 - SSIM)` with `l = lambda_dssim`.
pub fn photometric(render: &Map, gt: &Map, lambda_dssim: f64) -> Result<MapLoss> {
    let l = l1(render, gt)?;
    let mut grad = l.grad;
    grad.scale(1.0 - lambda_dssim);
    let mut value = (1.0 - lambda_dssim) * l.value;
    if lambda_dssim > 0.0 {
        let s = ssim(render, gt)?;
        value += lambda_dssim * (1.0 - s.value);
        for (g, sg) in grad.data.iter_mut().zip(&s.grad.data) {
            *g -= lambda_dssim * sg;
        }
    }
    Ok(MapLoss { value, grad })
}

// ----------------------------------------------------------------------
// Depth distortion

/// Mean of the per-pixel distortion map.
pub fn depth_distortion(distortion: &Map) -> MapLoss {
    let n = distortion.data.len().max(1) as f64;
    MapLoss {
        value: distortion.data.iter().sum::<f64>() / n,
        grad: Map::filled(distortion.width, distortion.height, 1, 1.0 / n),
    }
}

/// Per-pixel factor `(near / z^2)^2` that converts the camera-depth
/// distortion into that of the normalized depth `1 - near / z` (first
/// order in the depth spread). `z` is the median depth, or the view's mean
/// median depth where a pixel has none, and is not differentiated.
pub fn normalized_distortion_weights(depth_median: &Map, near: f64) -> Map {
    let valid: Vec<f64> = depth_median.data.iter().copied().filter(|z| *z > 0.0).collect();
    let mut w = Map::new(depth_median.width, depth_median.height, 1);
    if valid.is_empty() {
        return w;
    }
    let fallback = valid.iter().sum::<f64>() / valid.len() as f64;
    for (o, z) in w.data.iter_mut().zip(&depth_median.data) {
        let z = if *z > 0.0 { *z } else { fallback };
        *o = (near / (z * z)).powi(2);
    }
    w
}

// ----------------------------------------------------------------------
// Normals from depth

/// Camera-frame normals from a z-depth map by central differences of the
/// back-projected points. Pixels on the border or next to a non-positive
/// depth are masked out (mask 0, normal 0).
pub fn depth_to_normal(depth: &Map, camera: &Camera) -> (Map, Map) {
    let (w, h) = (depth.width, depth.height);
    let mut normals = Map::new(w, h, 3);
    let mut mask = Map::new(w, h, 1);
    let point = |x: usize, y: usize| camera.backproject(x as f64 + 0.5, y as f64 + 0.5, depth.get(x, y, 0));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let ok = [(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .all(|&(i, j)| depth.get(i, j, 0) > 0.0);
            if !ok {
                continue;
            }
            let dx = point(x + 1, y) - point(x - 1, y);
            let dy = point(x, y + 1) - point(x, y - 1);
            let n = dx.cross(&dy);
            let norm = n.norm();
            if !(norm > 0.0) {
                continue;
            }
            let mut n = n / norm;
            if n.dot(&point(x, y)) > 0.0 {
                n = -n;
            }
            normals.pixel_mut(y * w + x).copy_from_slice(n.as_slice());
            mask.data[y * w + x] = 1.0;
        }
    }
    (normals, mask)
}

// ----------------------------------------------------------------------
// Curvature-guided normal consistency

/// `1 - sigmoid(ln(|K| + eps)) = 1 / (1 + |K| + eps)`.
#[inline]
pub fn curvature_guidance(k: f64, eps: f64) -> f64 {
    1.0 / (1.0 + k.abs() + eps)
}

#[derive(Clone, Debug)]
pub struct NormalConsistency {
    pub value: f64,
    pub grad_normal: Map,
    pub grad_alpha: Map,
}

/// Mean over pixels of `lambda_K(K) * sum_i w_i (1 - n_i . N)`, written in
/// blended form as `lambda_K (alpha - normal_map . N)`. `N` is a fixed
/// target and the guidance weight is not differentiated.
pub fn curvature_guided_normal_consistency(
    normal_map: &Map,
    alpha: &Map,
    curvature: &Map,
    target: &Map,
    mask: &Map,
    eps_k: f64,
    guidance: bool,
) -> Result<NormalConsistency> {
    normal_map.check_same_shape(target)?;
    alpha.check_same_shape(mask)?;
    alpha.check_same_shape(curvature)?;
    let (w, h) = (alpha.width, alpha.height);
    let n = (w * h).max(1) as f64;
    let mut grad_normal = Map::new(w, h, 3);
    let mut grad_alpha = Map::new(w, h, 1);
    let mut total = 0.0;
    for p in 0..w * h {
        if mask.data[p] <= 0.0 {
            continue;
        }
        let lk = if guidance { curvature_guidance(curvature.data[p], eps_k) } else { 1.0 };
        let nm = normal_map.pixel(p);
        let tg = target.pixel(p);
        let dot = nm[0] * tg[0] + nm[1] * tg[1] + nm[2] * tg[2];
        total += lk * (alpha.data[p] - dot);
        grad_alpha.data[p] = lk / n;
        for c in 0..3 {
            grad_normal.data[3 * p + c] = -lk * tg[c] / n;
        }
    }
    Ok(NormalConsistency {
        value: total / n,
        grad_normal,
        grad_alpha,
    })
}

// ----------------------------------------------------------------------
// Multi-view

/// Inputs of one view for the multi-view loss.
#[derive(Clone, Copy, Debug)]
pub struct MvView<'a> {
    pub camera: &'a Camera,
    /// Ground-truth intensity (single channel).
    pub gray: &'a Map,
    pub depth_blend: &'a Map,
    pub alpha: &'a Map,
    pub normal: &'a Map,
}

impl<'a> MvView<'a> {
    pub fn from_render(camera: &'a Camera, gray: &'a Map, t: &'a RenderTargets) -> Self {
        Self {
            camera,
            gray,
            depth_blend: &t.depth_blend,
            alpha: &t.alpha,
            normal: &t.normal,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiViewLoss {
    pub value: f64,
    pub valid: usize,
    pub grad_normal: Map,
    pub grad_depth: Map,
    pub grad_alpha: Map,
}

type D5 = Dual<5>;

/// Plane-induced homography `K_n (R + T n^T / (n . X)) K_r^-1` between
/// two views, with `n` and `X` in the reference camera frame.
pub fn plane_homography(reference: &Camera, neighbor: &Camera, n: &Vector3<f64>, x: &Vector3<f64>) -> Option<Matrix3<f64>> {
    let delta = n.dot(x);
    if delta.abs() < PLANE_DEGENERATE {
        return None;
    }
    let (r, t) = reference.relative_to(neighbor);
    Some(neighbor.intrinsics.matrix() * (r + t * n.transpose() / delta) * reference.intrinsics.inverse_matrix())
}

/// Applies `K_n (R v + T (n . v) / delta)` to a constant ray `v = K_r^-1 q`.
fn warp(kn: &Matrix3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>, n: &[D5; 3], delta: D5, v: &Vector3<f64>) -> Option<(D5, D5)> {
    let nv = n[0] * v.x + n[1] * v.y + n[2] * v.z;
    let s = nv / delta;
    let rv = r * v;
    let w = [
        s * t.x + rv.x,
        s * t.y + rv.y,
        s * t.z + rv.z,
    ];
    let p = [
        w[0] * kn[(0, 0)] + w[1] * kn[(0, 1)] + w[2] * kn[(0, 2)],
        w[0] * kn[(1, 0)] + w[1] * kn[(1, 1)] + w[2] * kn[(1, 2)],
        w[0] * kn[(2, 0)] + w[1] * kn[(2, 1)] + w[2] * kn[(2, 2)],
    ];
    if !(p[2].v > 1e-9) {
        return None;
    }
    Some((p[0] / p[2], p[1] / p[2]))
}

/// Bilinear sample at continuous pixel coordinates (pixel centers at +0.5).
/// `None` unless all four taps are inside the image.
fn bilinear(img: &Map, u: D5, v: D5) -> Option<D5> {
    let (fx, fy) = (u - 0.5, v - 0.5);
    let (x0, y0) = (fx.v.floor(), fy.v.floor());
    if !(x0 >= 0.0 && y0 >= 0.0 && x0 + 1.0 < img.width as f64 && y0 + 1.0 < img.height as f64) {
        return None;
    }
    let (xi, yi) = (x0 as usize, y0 as usize);
    let (wx, wy) = (fx - x0, fy - y0);
    let i00 = img.get(xi, yi, 0);
    let i10 = img.get(xi + 1, yi, 0);
    let i01 = img.get(xi, yi + 1, 0);
    let i11 = img.get(xi + 1, yi + 1, 0);
    let top = wx * (i10 - i00) + i00;
    let bot = wx * (i11 - i01) + i01;
    Some(wy * (bot - top) + top)
}

/// Per-pixel multi-view loss with gradients w.r.t. the reference normal
/// map (3), blended depth and alpha at that pixel. `patch == 0` returns
/// the reprojection error alone.
fn mv_pixel(
    r: &MvView,
    nb: &MvView,
    x: usize,
    y: usize,
    patch: usize,
    full_chain: bool,
) -> Option<(f64, [f64; 5])> {
    let (w, _) = (r.alpha.width, r.alpha.height);
    let p = y * w + x;
    let alpha = r.alpha.data[p];
    if !(alpha > COVERED_ALPHA) {
        return None;
    }
    let nm = r.normal.pixel(p);
    let nv = [D5::var(nm[0], 0), D5::var(nm[1], 1), D5::var(nm[2], 2)];
    let depth = D5::var(r.depth_blend.data[p], 3) / D5::var(alpha, 4);
    let norm = (nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]).sqrt();
    if !(norm.v > 1e-12) {
        return None;
    }
    let n = [nv[0] / norm, nv[1] / norm, nv[2] / norm];
    let kr_inv = r.camera.intrinsics.inverse_matrix();
    let (u0, v0) = (x as f64 + 0.5, y as f64 + 0.5);
    let ray0 = kr_inv * Vector3::new(u0, v0, 1.0);
    // delta = n . X with X = depth * ray0.
    let delta = (n[0] * ray0.x + n[1] * ray0.y + n[2] * ray0.z) * depth;
    if delta.v.abs() < PLANE_DEGENERATE {
        return None;
    }
    let (rot, tr) = r.camera.relative_to(nb.camera);
    let kn = nb.camera.intrinsics.matrix();
    let (un, vn) = warp(&kn, &rot, &tr, &n, delta, &ray0)?;

    // Backward warp with the neighbor's own (fixed) plane at the nearest pixel.
    let (nx, ny) = (un.v.floor(), vn.v.floor());
    if !(nx >= 0.0 && ny >= 0.0 && nx < nb.alpha.width as f64 && ny < nb.alpha.height as f64) {
        return None;
    }
    let q = ny as usize * nb.alpha.width + nx as usize;
    let an = nb.alpha.data[q];
    if !(an > COVERED_ALPHA) {
        return None;
    }
    let nn = Vector3::from_column_slice(nb.normal.pixel(q));
    if !(nn.norm() > 1e-12) {
        return None;
    }
    let nn = nn.normalize();
    let xn = nb.camera.backproject(nx + 0.5, ny + 0.5, nb.depth_blend.data[q] / an);
    let delta_n = nn.dot(&xn);
    if delta_n.abs() < PLANE_DEGENERATE {
        return None;
    }
    let (rot_b, tr_b) = nb.camera.relative_to(r.camera);
    let kn_inv = nb.camera.intrinsics.inverse_matrix();
    let kr = r.camera.intrinsics.matrix();
    // Ray of the (dual) warped pixel in the neighbor frame.
    let ray_n = [
        un * kn_inv[(0, 0)] + vn * kn_inv[(0, 1)] + kn_inv[(0, 2)],
        un * kn_inv[(1, 0)] + vn * kn_inv[(1, 1)] + kn_inv[(1, 2)],
        D5::constant(1.0),
    ];
    let s = (ray_n[0] * nn.x + ray_n[1] * nn.y + ray_n[2] * nn.z) / delta_n;
    let mut wv = [D5::constant(0.0); 3];
    for i in 0..3 {
        wv[i] = ray_n[0] * rot_b[(i, 0)] + ray_n[1] * rot_b[(i, 1)] + ray_n[2] * rot_b[(i, 2)] + s * tr_b[i];
    }
    let mut pr = [D5::constant(0.0); 3];
    for i in 0..3 {
        pr[i] = wv[0] * kr[(i, 0)] + wv[1] * kr[(i, 1)] + wv[2] * kr[(i, 2)];
    }
    if !(pr[2].v > 1e-9) {
        return None;
    }
    let du = pr[0] / pr[2] - u0;
    let dv = pr[1] / pr[2] - v0;
    let geom = (du * du + dv * dv).sqrt();
    if patch == 0 {
        return Some((geom.v, geom.d));
    }

    // NCC between the reference patch and its warp into the neighbor.
    let half = (patch / 2) as i64;
    let (wr, hr) = (r.gray.width as i64, r.gray.height as i64);
    if (x as i64) < half || (y as i64) < half || x as i64 + half >= wr || y as i64 + half >= hr {
        return None;
    }
    let count = (patch * patch) as f64;
    let mut ref_vals = Vec::with_capacity(patch * patch);
    let mut nb_vals = Vec::with_capacity(patch * patch);
    for j in -half..=half {
        for i in -half..=half {
            let (qx, qy) = ((x as i64 + i) as usize, (y as i64 + j) as usize);
            ref_vals.push(r.gray.get(qx, qy, 0));
            let ray = kr_inv * Vector3::new(qx as f64 + 0.5, qy as f64 + 0.5, 1.0);
            let (su, sv) = warp(&kn, &rot, &tr, &n, delta, &ray)?;
            nb_vals.push(bilinear(nb.gray, su, sv)?);
        }
    }
    let mean_r = ref_vals.iter().sum::<f64>() / count;
    let mut mean_n = D5::constant(0.0);
    for v in &nb_vals {
        mean_n = mean_n + *v;
    }
    mean_n = mean_n / count;
    let mut cov = D5::constant(0.0);
    let mut var_n = D5::constant(0.0);
    let mut var_r = 0.0;
    for (a, b) in ref_vals.iter().zip(&nb_vals) {
        let da = a - mean_r;
        let db = *b - mean_n;
        cov = cov + db * da;
        var_n = var_n + db * db;
        var_r += da * da;
    }
    if var_r < NCC_MIN_VARIANCE * count || var_n.v < NCC_MIN_VARIANCE * count {
        return None;
    }
    let mut ncc = cov / (var_n * var_r).sqrt();
    if !full_chain {
        ncc = D5::constant(ncc.v);
    }
    let total = geom + (D5::constant(1.0) - ncc);
    Some((total.v, total.d))
}

/// Per-pixel distance in pixels between a reference pixel center and its
/// round trip through both plane homographies; negative where undefined.
pub fn reprojection_error_map(reference: &MvView, neighbor: &MvView) -> Map {
    let (w, h) = (reference.alpha.width, reference.alpha.height);
    let mut out = Map::filled(w, h, 1, -1.0);
    for y in 0..h {
        for x in 0..w {
            if let Some((e, _)) = mv_pixel(reference, neighbor, x, y, 0, true) {
                out.data[y * w + x] = e;
            }
        }
    }
    out
}

/// Mean over valid reference pixels of the forward-backward reprojection
/// error plus `1 - NCC` of the homography-warped patch.
pub fn multiview(reference: &MvView, neighbor: &MvView, patch: usize, full_chain: bool) -> Result<MultiViewLoss> {
    let (w, h) = (reference.alpha.width, reference.alpha.height);
    if reference.gray.width != w || reference.gray.height != h || reference.gray.channels != 1 {
        return Err(QgsError::DimensionMismatch {
            expected: format!("{w}x{h}x1 reference intensity"),
            actual: format!(
                "{}x{}x{}",
                reference.gray.width, reference.gray.height, reference.gray.channels
            ),
        });
    }
    if neighbor.gray.channels != 1 {
        return Err(QgsError::DimensionMismatch {
            expected: "single-channel neighbor intensity".into(),
            actual: format!("{} channels", neighbor.gray.channels),
        });
    }
    let rows: Vec<Vec<(usize, f64, [f64; 5])>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .filter_map(|x| mv_pixel(reference, neighbor, x, y, patch, full_chain).map(|(v, d)| (y * w + x, v, d)))
                .collect()
        })
        .collect();
    let valid: usize = rows.iter().map(Vec::len).sum();
    let mut out = MultiViewLoss {
        value: 0.0,
        valid,
        grad_normal: Map::new(w, h, 3),
        grad_depth: Map::new(w, h, 1),
        grad_alpha: Map::new(w, h, 1),
    };
    if valid == 0 {
        return Ok(out);
    }
    let inv = 1.0 / valid as f64;
    for (p, v, d) in rows.into_iter().flatten() {
        out.value += v * inv;
        for c in 0..3 {
            out.grad_normal.data[3 * p + c] = d[c] * inv;
        }
        out.grad_depth.data[p] = d[3] * inv;
        out.grad_alpha.data[p] = d[4] * inv;
    }
    Ok(out)
}

// ----------------------------------------------------------------------
// Total

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub photometric: f64,
    pub distortion: f64,
    pub normal: f64,
    pub multiview: f64,
}

/// `L_c + lambda_d L_d + lambda_n L_Kn + lambda_Mv L_Mv`.
pub fn total(c: &LossComponents, w: &LossWeights) -> f64 {
    c.photometric + w.lambda_d * c.distortion + w.lambda_n * c.normal + w.lambda_mv * c.multiview
}

/// Which regularizers are active for a given step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub distortion: bool,
    pub normal: bool,
    pub multiview: bool,
}

/// Loss of one rendered view and its gradient w.r.t. the render targets.
/// `mv` carries the reference/neighbor inputs when the multi-view term is on.
pub fn view_loss(
    t: &RenderTargets,
    gt: &Map,
    camera: &Camera,
    weights: &LossWeights,
    active: ActiveTerms,
    mv: Option<(&MvView, &MvView)>,
) -> Result<(LossComponents, TargetGrads)> {
    let mut grads = TargetGrads::zeros(t.width, t.height);
    let mut comp = LossComponents::default();
    let photo = photometric(&t.color, gt, weights.lambda_dssim)?;
    comp.photometric = photo.value;
    grads.color = photo.grad;
    if active.distortion && weights.lambda_d > 0.0 {
        if weights.distortion_near > 0.0 {
            let w = normalized_distortion_weights(&t.depth_median, weights.distortion_near);
            let mut scaled = t.distortion.clone();
            scaled.data.iter_mut().zip(&w.data).for_each(|(d, w)| *d *= w);
            let d = depth_distortion(&scaled);
            comp.distortion = d.value;
            grads.distortion = d.grad;
            grads.distortion.data.iter_mut().zip(&w.data).for_each(|(g, w)| *g *= w * weights.lambda_d);
        } else {
            let d = depth_distortion(&t.distortion);
            comp.distortion = d.value;
            grads.distortion = d.grad;
            grads.distortion.scale(weights.lambda_d);
        }
    }
    if active.normal && weights.lambda_n > 0.0 {
        let (target, mask) = depth_to_normal(&t.depth_median, camera);
        let nc = curvature_guided_normal_consistency(
            &t.normal,
            &t.alpha,
            &t.curvature,
            &target,
            &mask,
            weights.eps_k,
            weights.curvature_guidance,
        )?;
        comp.normal = nc.value;
        for (g, v) in grads.normal.data.iter_mut().zip(&nc.grad_normal.data) {
            *g += weights.lambda_n * v;
        }
        for (g, v) in grads.alpha.data.iter_mut().zip(&nc.grad_alpha.data) {
            *g += weights.lambda_n * v;
        }
    }
    if let (true, Some((r, n))) = (active.multiview && weights.lambda_mv > 0.0, mv) {
        let m = multiview(r, n, weights.ncc_patch, weights.mv_full_chain)?;
        comp.multiview = m.value;
        for (g, v) in grads.normal.data.iter_mut().zip(&m.grad_normal.data) {
            *g += weights.lambda_mv * v;
        }
        for (g, v) in grads.depth_blend.data.iter_mut().zip(&m.grad_depth.data) {
            *g += weights.lambda_mv * v;
        }
        for (g, v) in grads.alpha.data.iter_mut().zip(&m.grad_alpha.data) {
            *g += weights.lambda_mv * v;
        }
    }
    Ok((comp, grads))
}
