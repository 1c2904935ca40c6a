//! Adam over the flat primitive parameter vector with per-group rates.

use qgs_core::primitive::{
    normalize_quat, QuadricPrimitive, NUM_PARAMS, PARAM_CENTER, PARAM_RAW_OPACITY, PARAM_RAW_SCALES,
    PARAM_RAW_SIGNS, PARAM_ROTATION, PARAM_SH,
};
use qgs_core::raster::ParamGrad;

use crate::config::TrainConfig;

/// Learning rate of every slot of the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    pub center_init: f64,
    pub center_final: f64,
    /// Iterations over which the center rate decays.
    pub center_steps: usize,
    pub rotation: f64,
    pub scale: f64,
    pub sign: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

impl LearningRates {
    pub fn from_config(cfg: &TrainConfig, scene_extent: f64) -> Self {
        Self {
            center_init: cfg.lr_center * scene_extent,
            center_final: cfg.lr_center_final * scene_extent,
            center_steps: cfg.iterations.max(1),
            rotation: cfg.lr_rotation,
            scale: cfg.lr_scale,
            sign: cfg.lr_sign,
            opacity: cfg.lr_opacity,
            sh_dc: cfg.lr_sh,
            sh_rest: cfg.lr_sh_rest,
        }
    }

    /// Log-linear interpolation between the initial and final center rate.
    pub fn center_at(&self, step: usize) -> f64 {
        let t = (step as f64 / self.center_steps as f64).clamp(0.0, 1.0);
        if self.center_init <= 0.0 || self.center_final <= 0.0 {
            return self.center_init * (1.0 - t) + self.center_final * t;
        }
        (self.center_init.ln() * (1.0 - t) + self.center_final.ln() * t).exp()
    }

    fn table(&self, step: usize) -> [f64; NUM_PARAMS] {
        let mut lr = [0.0; NUM_PARAMS];
        lr[PARAM_CENTER..PARAM_ROTATION].fill(self.center_at(step));
        lr[PARAM_ROTATION..PARAM_RAW_SCALES].fill(self.rotation);
        lr[PARAM_RAW_SCALES..PARAM_RAW_SIGNS].fill(self.scale);
        lr[PARAM_RAW_SIGNS..PARAM_RAW_OPACITY].fill(self.sign);
        lr[PARAM_RAW_OPACITY] = self.opacity;
        lr[PARAM_SH..PARAM_SH + 3].fill(self.sh_dc);
        lr[PARAM_SH + 3..].fill(self.sh_rest);
        lr
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: [f64; NUM_PARAMS],
    v: [f64; NUM_PARAMS],
}

impl Default for Moments {
    fn default() -> Self {
        Self {
            m: [0.0; NUM_PARAMS],
            v: [0.0; NUM_PARAMS],
        }
    }
}

/// Adam with one moment pair per primitive slot. The bias correction uses
/// a shared step count, so freshly added primitives start from zero
/// moments under the current correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    state: Vec<Moments>,
}

/// What one [`Adam::step`] did.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    /// Indices whose gradient was non-finite and whose update was skipped.
    pub skipped: Vec<usize>,
}

impl Adam {
    pub fn new(rates: LearningRates, beta1: f64, beta2: f64, eps: f64, n: usize) -> Self {
        Self {
            rates,
            beta1,
            beta2,
            eps,
            step: 0,
            state: vec![Moments::default(); n],
        }
    }

    pub fn from_config(cfg: &TrainConfig, scene_extent: f64, n: usize) -> Self {
        Self::new(
            LearningRates::from_config(cfg, scene_extent),
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
            n,
        )
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn len(&self) -> usize {
        self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    /// Applies one update. `grads[i]` belongs to `primitives[i]`.
    pub fn step(&mut self, primitives: &mut [QuadricPrimitive], grads: &[ParamGrad]) -> StepReport {
        assert_eq!(primitives.len(), self.state.len(), "optimizer state out of sync");
        assert_eq!(primitives.len(), grads.len(), "gradient count mismatch");
        self.step += 1;
        let lr = self.rates.table(self.step - 1);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut report = StepReport::default();
        for (i, (prim, g)) in primitives.iter_mut().zip(grads).enumerate() {
            if !g.is_finite() {
                log::warn!("skipping update of primitive {i}: non-finite gradient");
                report.skipped.push(i);
                continue;
            }
            let g = g.to_array();
            let st = &mut self.state[i];
            let mut p = prim.to_params();
            for k in 0..NUM_PARAMS {
                st.m[k] = self.beta1 * st.m[k] + (1.0 - self.beta1) * g[k];
                st.v[k] = self.beta2 * st.v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = st.m[k] / bc1;
                let vhat = st.v[k] / bc2;
                p[k] -= lr[k] * mhat / (vhat.sqrt() + self.eps);
            }
            let mut next = QuadricPrimitive::from_params(&p);
            next.rotation = normalize_quat(next.rotation);
            *prim = next;
        }
        report
    }

    /// Keeps the moments of the primitives where `keep` is true.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.state.len());
        let mut it = keep.iter();
        self.state.retain(|_| *it.next().expect("length checked"));
    }

    /// Appends fresh moments for `n` new primitives.
    pub fn extend(&mut self, n: usize) {
        self.state.extend(std::iter::repeat_with(Moments::default).take(n));
    }

    /// Clears the opacity moments of every primitive.
    pub fn reset_opacity(&mut self) {
        for st in &mut self.state {
            st.m[PARAM_RAW_OPACITY] = 0.0;
            st.v[PARAM_RAW_OPACITY] = 0.0;
        }
    }
}
