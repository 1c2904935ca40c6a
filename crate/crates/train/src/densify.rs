//! Adaptive density control: split, clone and prune.

use nalgebra::{Matrix3, Rotation3, Vector3};

use qgs_core::primitive::{matrix_to_quat, sigmoid, QuadricPrimitive, SurfaceShape};
use qgs_core::raster::GradientBuffer;

use crate::config::TrainConfig;

/// What a split does with the parent's raw `s3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitS3 {
    /// Children keep the parent's raw `s3`.
    Copy,
    /// Children restart near-planar at `init_s3_ratio` of their in-plane scale.
    Reset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    /// Split instead of clone above this in-plane scale.
    pub split_extent: f64,
    pub prune_opacity: f64,
    pub max_primitives: usize,
    pub s3_policy: SplitS3,
    pub init_s3_ratio: f64,
}

impl DensifyParams {
    pub fn from_config(cfg: &TrainConfig, scene_extent: f64) -> Self {
        Self {
            grad_threshold: cfg.densify_grad_threshold,
            split_extent: cfg.percent_dense * scene_extent,
            prune_opacity: cfg.prune_opacity,
            max_primitives: cfg.max_primitives,
            s3_policy: if cfg.split_s3_policy == "reset" {
                SplitS3::Reset
            } else {
                SplitS3::Copy
            },
            init_s3_ratio: cfg.init_s3_ratio,
        }
    }
}

/// The densification statistic of one view: the gradient of the loss
/// summed (not averaged) over pixels with respect to the projected center
/// in pixel units. `screen_grad` is that gradient for the mean loss.
pub fn view_statistic(screen_grad: f64, width: usize, height: usize) -> f64 {
    screen_grad * (width * height) as f64
}

/// Per-primitive gradient statistics accumulated between densifications.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    grad_sum: Vec<f64>,
    views: Vec<u32>,
    center_grad: Vec<Vector3<f64>>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            views: vec![0; n],
            center_grad: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_sum.is_empty()
    }

    pub fn accumulate(&mut self, buf: &GradientBuffer, width: usize, height: usize) {
        assert_eq!(buf.len(), self.len(), "statistics out of sync");
        for i in 0..buf.len() {
            if buf.touched[i] && buf.screen_grad[i].is_finite() {
                self.grad_sum[i] += view_statistic(buf.screen_grad[i], width, height);
                self.views[i] += 1;
                if buf.params[i].center.iter().all(|v| v.is_finite()) {
                    self.center_grad[i] += buf.params[i].center;
                }
            }
        }
    }

    /// Mean statistic over the views that saw primitive `i`.
    pub fn mean(&self, i: usize) -> f64 {
        if self.views[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.views[i] as f64
        }
    }

    /// The `q`-quantile of the means over primitives seen at least once.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        let mut v: Vec<f64> = (0..self.len()).filter(|&i| self.views[i] > 0).map(|i| self.mean(i)).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize])
    }

    /// Records a raw mean for tests and tools.
    pub fn set_mean(&mut self, i: usize, mean: f64, center_grad: Vector3<f64>) {
        self.grad_sum[i] = mean;
        self.views[i] = 1;
        self.center_grad[i] = center_grad;
    }
}

/// Outcome of [`densify_and_prune`].
#[derive(Clone, Debug, PartialEq)]
pub struct DensifyOutcome {
    pub primitives: Vec<QuadricPrimitive>,
    /// Which input primitives survive, in order, at the front of `primitives`.
    pub kept: Vec<bool>,
    /// Primitives appended after the survivors.
    pub added: usize,
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
}

/// The two children of a split along the larger in-plane axis. Each child
/// sits on the parent's surface at `±σ/2`, is tilted to the surface normal
/// there and has that axis' scale halved.
pub fn split_children(parent: &QuadricPrimitive, policy: SplitS3, init_s3_ratio: f64) -> [QuadricPrimitive; 2] {
    let s = parent.scales().map(|s| s.s).unwrap_or([1.0; 3]);
    let shape = SurfaceShape::new(s);
    let k = if s[0].abs() >= s[1].abs() { 0 } else { 1 };
    let sigma = s[k].abs();
    let lam = if shape.planar { 0.0 } else { shape.lambda[k] };
    let rot = parent.rotation_matrix();
    let mut axis = Vector3::zeros();
    axis[k] = 1.0;
    let tilt_axis = if k == 0 { Vector3::y_axis() } else { Vector3::x_axis() };
    [-1.0, 1.0].map(|side: f64| {
        let d = 0.5 * sigma * side;
        let local = axis * d + Vector3::z() * (lam * d * d);
        let theta = (2.0 * lam * d).atan();
        // Rotates local z onto the surface normal at the child center.
        let tilt: Matrix3<f64> = Rotation3::from_axis_angle(&tilt_axis, if k == 0 { -theta } else { theta }).into_inner();
        let mut child = parent.clone();
        child.center = parent.center + rot * local;
        child.rotation = matrix_to_quat(&(rot * tilt));
        child.raw_scales[k] -= std::f64::consts::LN_2;
        if policy == SplitS3::Reset {
            let inplane = (s[0].abs().max(s[1].abs()) * 0.5).max(1e-12);
            child.raw_scales[2] = (init_s3_ratio * inplane).ln();
        }
        child
    })
}

/// Splits or clones primitives whose mean statistic exceeds the threshold
/// and removes transparent or non-finite ones. Candidates are taken in
/// decreasing statistic order until `max_primitives` would be exceeded.
pub fn densify_and_prune(
    primitives: &[QuadricPrimitive],
    stats: &DensifyStats,
    params: &DensifyParams,
    densify: bool,
) -> DensifyOutcome {
    let n = primitives.len();
    assert_eq!(stats.len(), n, "statistics out of sync");
    let dead = |p: &QuadricPrimitive| !p.is_finite() || p.opacity() < params.prune_opacity;
    let mut kept: Vec<bool> = primitives.iter().map(|p| !dead(p)).collect();
    let pruned = kept.iter().filter(|k| !**k).count();
    let mut count = n - pruned;

    let mut added = Vec::new();
    let (mut split, mut cloned) = (0, 0);
    if densify {
        let mut candidates: Vec<usize> = (0..n).filter(|&i| kept[i] && stats.mean(i) > params.grad_threshold).collect();
        candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
        for i in candidates {
            if count + 1 > params.max_primitives {
                break;
            }
            let p = &primitives[i];
            let Ok(sc) = p.scales() else { continue };
            let extent = sc.s[0].abs().max(sc.s[1].abs());
            if extent > params.split_extent {
                let kids = split_children(p, params.s3_policy, params.init_s3_ratio);
                if kids.iter().all(QuadricPrimitive::is_finite) {
                    kept[i] = false;
                    added.extend(kids);
                    split += 1;
                    count += 1;
                }
            } else {
                let mut c = p.clone();
                let g = stats.center_grad[i];
                if g.norm() > 0.0 {
                    c.center -= g.normalize() * (0.5 * extent);
                }
                added.push(c);
                cloned += 1;
                count += 1;
            }
        }
    }

    let mut out: Vec<QuadricPrimitive> = primitives.iter().zip(&kept).filter(|(_, k)| **k).map(|(p, _)| p.clone()).collect();
    let added_n = added.len();
    out.extend(added);
    DensifyOutcome {
        primitives: out,
        kept,
        added: added_n,
        split,
        cloned,
        pruned,
    }
}

/// Caps every opacity at `ceiling`, as done periodically to let
/// occluded primitives be pruned.
pub fn reset_opacity(primitives: &mut [QuadricPrimitive], ceiling: f64) {
    let raw = qgs_core::primitive::logit(ceiling);
    for p in primitives {
        if sigmoid(p.raw_opacity) > ceiling {
            p.raw_opacity = raw;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qgs_core::primitive::logit;

    fn params() -> DensifyParams {
        DensifyParams {
            grad_threshold: 0.3,
            split_extent: 0.05,
            prune_opacity: 0.005,
            max_primitives: 100,
            s3_policy: SplitS3::Copy,
            init_s3_ratio: 0.01,
        }
    }

    fn prim(scale: f64) -> QuadricPrimitive {
        let mut p = QuadricPrimitive::new(Vector3::zeros());
        p.raw_scales = Vector3::new(scale.ln(), (0.5 * scale).ln(), (0.1 * scale).ln());
        p.raw_opacity = logit(0.5);
        p
    }

    #[test]
    fn threshold_example() {
        let ps = vec![prim(0.01), prim(0.01)];
        let mut st = DensifyStats::new(2);
        st.set_mean(0, 0.31, Vector3::x());
        st.set_mean(1, 0.29, Vector3::x());
        let out = densify_and_prune(&ps, &st, &params(), true);
        assert_eq!(out.cloned, 1);
        assert_eq!(out.primitives.len(), 3);
        // The clone moved against the gradient.
        assert!(out.primitives[2].center.x < 0.0);
    }

    #[test]
    fn transparent_primitives_are_pruned() {
        let mut p = prim(0.01);
        p.raw_opacity = logit(0.004);
        let out = densify_and_prune(&[p, prim(0.01)], &DensifyStats::new(2), &params(), true);
        assert_eq!(out.pruned, 1);
        assert_eq!(out.kept, vec![false, true]);
        assert_eq!(out.primitives.len(), 1);
    }

    #[test]
    fn large_primitives_split_and_the_cap_holds() {
        let ps = vec![prim(0.2); 5];
        let mut st = DensifyStats::new(5);
        for i in 0..5 {
            st.set_mean(i, 1.0 + i as f64, Vector3::zeros());
        }
        let out = densify_and_prune(&ps, &st, &DensifyParams { max_primitives: 7, ..params() }, true);
        assert_eq!(out.split, 2);
        assert_eq!(out.primitives.len(), 7);
        // The highest statistics go first.
        assert_eq!(out.kept, vec![true, true, true, false, false]);
        for c in &out.primitives[3..] {
            assert!((c.raw_scales[0] - (0.1f64).ln()).abs() < 1e-12);
            assert_eq!(c.raw_scales[2], ps[0].raw_scales[2]);
        }
    }

    #[test]
    fn split_children_stay_on_a_curved_parent() {
        let mut p = prim(0.4);
        p.rotation = qgs_core::primitive::normalize_quat([0.9, 0.2, -0.3, 0.1]);
        p.center = Vector3::new(0.3, -0.2, 1.0);
        let s = p.scales().unwrap().s;
        let shape = SurfaceShape::new(s);
        for c in split_children(&p, SplitS3::Copy, 0.01) {
            let local = p.rotation_matrix().transpose() * (c.center - p.center);
            assert!((local.z - shape.height(local.x, local.y)).abs() < 1e-12);
            assert!((local.x.abs() - 0.5 * s[0]).abs() < 1e-12);
            // The child's normal is the parent's surface normal there.
            let n = Vector3::new(-2.0 * shape.lambda[0] * local.x, -2.0 * shape.lambda[1] * local.y, 1.0).normalize();
            let nc = p.rotation_matrix().transpose() * c.rotation_matrix().column(2);
            assert!((n - nc).norm() < 1e-12);
        }
    }

    #[test]
    fn opacity_reset_caps() {
        let mut ps = vec![prim(0.1), prim(0.1)];
        ps[1].raw_opacity = logit(0.003);
        reset_opacity(&mut ps, 0.01);
        assert!((ps[0].opacity() - 0.01).abs() < 1e-12);
        assert!((ps[1].opacity() - 0.003).abs() < 1e-12);
    }
}
