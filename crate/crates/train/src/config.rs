//! Flat `key = value` training configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every field of
//! [`TrainConfig`] is a key; unknown keys and unparsable values are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, TrainError};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(f64, usize, u64);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(format!("expected a boolean, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for [f64; 3] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three comma-separated numbers, got `{s}`"));
        }
        let mut out = [0.0; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = f64::from_str(p).map_err(|e| e.to_string())?;
        }
        Ok(out)
    }
    fn render(&self) -> String {
        format!("{},{},{}", self[0], self[1], self[2])
    }
}

macro_rules! train_config {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        #[allow(non_snake_case)]
        pub struct TrainConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl TrainConfig {
            /// All keys in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value).map_err(|msg| TrainError::Config {
                            key: key.to_string(),
                            msg,
                        })?;
                    })*
                    _ => return Err(TrainError::UnknownConfigKey(key.to_string())),
                }
                Ok(())
            }

            /// The configuration in the same format [`TrainConfig::parse`] reads.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($name), ConfigValue::render(&self.$name)).expect("write to string");)*
                s
            }
        }
    };
}

train_config! {
    /// Seeds every random choice of a run.
    seed: u64 = 0;
    iterations: usize = 7000;
    sh_degree: usize = 2;
    /// Iterations between raising the active SH degree by one.
    sh_increase_interval: usize = 1000;
    background: [f64; 3] = [0.0, 0.0, 0.0];

    /// Initial center learning rate as a fraction of the scene extent.
    lr_center: f64 = 1.6e-4;
    lr_center_final: f64 = 1.6e-6;
    lr_opacity: f64 = 0.05;
    lr_scale: f64 = 5e-3;
    lr_sign: f64 = 5e-3;
    lr_rotation: f64 = 1e-3;
    lr_sh: f64 = 2.5e-3;
    /// Learning rate of the non-DC SH coefficients.
    lr_sh_rest: f64 = 1.25e-4;
    adam_beta1: f64 = 0.9;
    adam_beta2: f64 = 0.999;
    adam_eps: f64 = 1e-15;

    /// `points` (seed cloud), `random` (uniform in the bounding volume) or `auto`.
    init: String = "auto".to_string();
    init_primitives: usize = 1000;
    init_opacity: f64 = 0.1;
    /// Raw sign parameter at initialization; tanh(3) is about 0.995.
    init_sign: f64 = 3.0;
    /// Initial `s3` relative to the in-plane scale (near-planar start).
    init_s3_ratio: f64 = 0.01;

    densify_grad_threshold: f64 = 0.3;
    percent_dense: f64 = 0.001;
    densify_from: usize = 500;
    densify_until: usize = 15000;
    densify_interval: usize = 100;
    opacity_reset_interval: usize = 3000;
    prune_opacity: f64 = 0.005;
    max_primitives: usize = 2000;
    /// `copy` keeps the parent's raw s3 in split children; `reset` restores the initial ratio.
    split_s3_policy: String = "copy".to_string();

    lambda_dssim: f64 = 0.2;
    lambda_d: f64 = 1000.0;
    /// Near plane of the normalized depth the distortion weight refers to (0: camera depth).
    distortion_near: f64 = 0.2;
    lambda_n: f64 = 0.05;
    lambda_mv: f64 = 0.05;
    eps_k: f64 = 1e-6;
    ncc_patch: usize = 7;
    distortion_from: usize = 3000;
    normal_from: usize = 3000;
    mv_from: usize = 7000;
    mv_full_chain: bool = true;
    mv_neighbors: usize = 2;
    mv_min_angle_deg: f64 = 15.0;

    /// Bounds strategy name (`tight` or `loose`).
    bounds: String = "tight".to_string();
    /// Replace the geodesic distance by the in-plane radius.
    euclidean_density: bool = false;
    /// Pin s3 to `s3_fixed_value` (planar disks).
    s3_fixed: bool = false;
    s3_fixed_value: f64 = 0.001;
    /// Disable the per-pixel resorting buffer.
    resort_off: bool = false;
    /// Weight every pixel of the normal term by 1 instead of by curvature.
    lambdaK_off: bool = false;
    mv_off: bool = false;

    /// Iterations between progress log lines (0 disables).
    log_interval: usize = 500;
}

impl TrainConfig {
    /// Parses `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TrainError::Config {
                key: format!("line {}", n + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(TrainError::Config {
                key: key.to_string(),
                msg: msg.to_string(),
            })
        };
        if self.sh_degree > 3 {
            return bad("sh_degree", "must be at most 3");
        }
        if !matches!(self.init.as_str(), "auto" | "points" | "random") {
            return bad("init", "must be auto, points or random");
        }
        if !matches!(self.split_s3_policy.as_str(), "copy" | "reset") {
            return bad("split_s3_policy", "must be copy or reset");
        }
        if self.densify_interval == 0 {
            return bad("densify_interval", "must be positive");
        }
        if self.init_primitives == 0 || self.max_primitives == 0 {
            return bad("init_primitives", "primitive counts must be positive");
        }
        if !(self.s3_fixed_value > 0.0) {
            return bad("s3_fixed_value", "must be positive");
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam_beta1", "Adam betas must lie in [0, 1)");
        }
        if self.background.iter().any(|c| !c.is_finite()) {
            return bad("background", "must be finite");
        }
        self.loss_weights().validate().map_err(|e| TrainError::Config {
            key: "loss weights".into(),
            msg: e.to_string(),
        })?;
        Ok(())
    }

    pub fn loss_weights(&self) -> qgs_core::losses::LossWeights {
        qgs_core::losses::LossWeights {
            lambda_dssim: self.lambda_dssim,
            lambda_d: self.lambda_d,
            distortion_near: self.distortion_near,
            lambda_n: self.lambda_n,
            lambda_mv: if self.mv_off { 0.0 } else { self.lambda_mv },
            eps_k: self.eps_k,
            curvature_guidance: !self.lambdaK_off,
            mv_full_chain: self.mv_full_chain,
            ncc_patch: self.ncc_patch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.seed = 7;
        cfg.background = [0.25, 0.5, 1.0];
        cfg.s3_fixed = true;
        cfg.init = "random".into();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_addressable() {
        let text = TrainConfig::default().to_text();
        assert_eq!(text.lines().count(), TrainConfig::KEYS.len());
        for key in TrainConfig::KEYS {
            let line = text.lines().find(|l| l.starts_with(&format!("{key} ="))).unwrap();
            let value = line.split_once('=').unwrap().1.trim();
            TrainConfig::default().set(key, value).unwrap();
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            TrainConfig::parse("iterations = 10\nlearning_rate = 3"),
            Err(TrainError::UnknownConfigKey(k)) if k == "learning_rate"
        ));
        assert!(TrainConfig::parse("iterations = ten").is_err());
        assert!(TrainConfig::parse("just words").is_err());
        assert!(TrainConfig::parse("sh_degree = 4").is_err());
        assert!(TrainConfig::parse("background = 1,2").is_err());
        let cfg = TrainConfig::parse("# comment\n\n  lambda_d = 100 \nmv_off = true\n").unwrap();
        assert_eq!(cfg.lambda_d, 100.0);
        assert_eq!(cfg.loss_weights().lambda_mv, 0.0);
    }
}
