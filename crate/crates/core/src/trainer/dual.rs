use serde::{Deserialize, Serialize};

use crate::trainer::config::{RegularizerConfig, RegularizerMode};

/// Lagrange multiplier for the architecture-entropy constraint, kept in
/// log space as `β = ln α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub mode: RegularizerMode,
    pub log_alpha: f64,
    pub alpha_fixed: f64,
    pub target: f64,
    pub lr: f64,
    pub log_alpha_min: f64,
    pub log_alpha_max: f64,
}

impl DualState {
    pub fn new(cfg: &RegularizerConfig, target: f64) -> Self {
        DualState {
            mode: cfg.mode,
            log_alpha: cfg.log_alpha_init,
            alpha_fixed: cfg.alpha_fixed,
            target,
            lr: cfg.lr_alpha,
            log_alpha_min: cfg.log_alpha_min,
            log_alpha_max: cfg.log_alpha_max,
        }
    }

    /// Coefficient applied to `H − H̄` in the loss.
    pub fn alpha(&self) -> f64 {
        match self.mode {
            RegularizerMode::Auto => self.log_alpha.exp(),
            RegularizerMode::Fixed => self.alpha_fixed,
            RegularizerMode::Off => 0.0,
        }
    }

    /// `β ← clamp(β + lr (H − H̄))`; a no-op outside auto mode.
    pub fn update(&mut self, entropy: f64) {
        if self.mode != RegularizerMode::Auto {
            return;
        }
        self.log_alpha = (self.log_alpha + self.lr * (entropy - self.target)).clamp(self.log_alpha_min, self.log_alpha_max);
    }
}
