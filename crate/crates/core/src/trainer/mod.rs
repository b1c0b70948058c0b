//! Joint optimization of the adaptation objectives.

mod adapt;
mod optim;
mod probe;
mod step;

pub use adapt::{adapt, evaluate, evaluate_report, predict, AdaptData, AdaptHooks, AdaptReport, EvalReport, Metric, NoHooks};
pub use optim::{AdamW, ADAM_BETAS, ADAM_EPS};
pub use probe::{fairness_probe, ProbeConfig, ProbeResult};
pub use step::{batch_objective, ObjectiveConfig, ObjectiveOutput, PreparedBatch, Trainer};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::error::{invalid_config, Result};
use crate::losses::{TopK, DEFAULT_MEAN_MOMENTUM};
use crate::teacher::EmaSchedule;

/// Reference batch size for linear learning-rate scaling.
pub const LR_REFERENCE_BATCH: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Standard,
    Transductive,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "standard" => Ok(Mode::Standard),
            "transductive" => Ok(Mode::Transductive),
            _ => Err(format!("unknown mode `{s}` (expected standard or transductive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub layer_decay: f64,
    /// Pseudo-label confidence threshold. Values above 1 switch self-training off.
    pub threshold: f64,
    pub mask_ratio: f64,
    /// Mask unit side in pixels.
    pub mask_patch_size: usize,
    pub lambda_reg: f64,
    pub lambda_align: f64,
    pub ema_mu0: f64,
    pub ema_mu_n: u64,
    pub align_top_k: TopK,
    pub freeze_classifier: bool,
    pub mode: Mode,
    pub seed: u64,
    pub strong: AugmentPolicy,
    /// Momentum of the running class-mean used when `K > B`.
    pub mean_momentum: f64,
    /// Compute the classifier branch from a second, unmasked strong-view forward.
    pub unmasked_cls_forward: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-5,
            batch_size: 64,
            epochs: 10,
            weight_decay: 0.05,
            layer_decay: 0.65,
            threshold: 0.7,
            mask_ratio: 0.3,
            mask_patch_size: 8,
            lambda_reg: 1.0,
            lambda_align: 0.2,
            ema_mu0: 0.999,
            ema_mu_n: 2000,
            align_top_k: TopK::All,
            freeze_classifier: false,
            mode: Mode::Standard,
            seed: 0,
            strong: AugmentPolicy::strong(),
            mean_momentum: DEFAULT_MEAN_MOMENTUM,
            unmasked_cls_forward: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("base_lr", self.base_lr), ("layer_decay", self.layer_decay)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid_config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.layer_decay > 1.0 {
            return Err(invalid_config("layer_decay must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(invalid_config("batch_size must be at least 1"));
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("threshold", self.threshold),
            ("lambda_reg", self.lambda_reg),
            ("lambda_align", self.lambda_align),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid_config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(invalid_config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.mean_momentum) {
            return Err(invalid_config("mean_momentum must be in [0, 1)"));
        }
        if let TopK::Nearest(0) = self.align_top_k {
            return Err(invalid_config("align_top_k must be positive"));
        }
        self.strong.validate()?;
        self.ema_schedule().map(|_| ())
    }

    pub fn ema_schedule(&self) -> Result<EmaSchedule> {
        EmaSchedule::new(self.ema_mu0, self.ema_mu_n)
    }

    /// Names of fields whose values differ between two configs.
    pub fn diff(&self, other: &TrainConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
                a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// `base_lr · batch_size / 256`
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / LR_REFERENCE_BATCH
}

/// Learning rate for each depth group `0..=L+1`: `lr · decay^(L+1−i)`.
pub fn layerwise_lrs(lr: f64, layer_decay: f64, depth: usize) -> Vec<f64> {
    (0..=depth + 1).map(|i| lr * layer_decay.powi((depth + 1 - i) as i32)).collect()
}

/// `lr · ½(1 + cos(π·step/total))`, no warmup.
pub fn cosine_lr(step: u64, total_steps: u64, lr: f64) -> f64 {
    if total_steps == 0 {
        return lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_scaling() {
        assert!((scaled_lr(2e-5, 1024) - 8e-5).abs() < 1e-20);
        assert_eq!(scaled_lr(3e-4, 256), 3e-4);
        assert_eq!(scaled_lr(2.56, 1), 0.01);
    }

    #[test]
    fn layerwise_examples() {
        let lrs = layerwise_lrs(1.0, 0.65, 6);
        assert_eq!(lrs.len(), 8);
        assert_eq!(lrs[7], 1.0);
        assert_eq!(lrs[6], 0.65);
        assert!((lrs[0] - 0.65f64.powi(7)).abs() < 1e-15);
        assert!((lrs[0] - 0.049_022).abs() < 1e-6);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn config_validation_and_diff() {
        let c = TrainConfig::default();
        assert!(c.validate().is_ok());
        let mut bad = c.clone();
        bad.layer_decay = 1.5;
        assert!(bad.validate().is_err());
        let mut off = c.clone();
        off.threshold = 1.01;
        assert!(off.validate().is_ok());
        let mut d = c.clone();
        d.seed = 3;
        d.lambda_reg = 0.2;
        let mut fields = c.diff(&d);
        fields.sort();
        assert_eq!(fields, vec!["lambda_reg".to_string(), "seed".to_string()]);
    }
}
