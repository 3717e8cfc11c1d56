//! Differential-privacy mechanisms and leakage measurements.

mod dcor;
mod dp;
mod kl;
mod laplace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dcor::{distance_correlation, distance_correlation_grad, nopeek_loss, NoPeekLoss, MAX_NOPEEK_BATCH};
pub use dp::{clip_by_norm, clip_slice, dp_fl_server_update, dp_local_gradient};
pub use kl::{histogram_kl, kl_leakage, smashed_leakage_report, LeakageReport, DEFAULT_BINS};
pub use laplace::{laplace_smash, SmashBounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsMode {
    /// Intervals taken from the batch being noised.
    #[default]
    Batch,
    /// Intervals fixed by a pass over the client's shard before training.
    Calibration,
}

/// Mechanism switches and their parameters. `epsilon` and `delta` are
/// recorded as metadata; the Gaussian scale is `noise_multiplier * clip`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub dp_sgd: bool,
    pub dp_fl: bool,
    pub laplace: bool,
    pub nopeek: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    pub noise_multiplier: f64,
    pub laplace_epsilon: f64,
    pub bounds: BoundsMode,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            dp_sgd: false,
            dp_fl: false,
            laplace: false,
            nopeek: false,
            epsilon: 1.0,
            delta: 1e-5,
            clip: 1.0,
            noise_multiplier: 1.0,
            laplace_epsilon: 1.0,
            bounds: BoundsMode::Batch,
            alpha1: 0.1,
            alpha2: 1.0,
        }
    }
}

impl PrivacyConfig {
    pub fn any_enabled(&self) -> bool {
        self.dp_sgd || self.dp_fl || self.laplace || self.nopeek
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("privacy: {m}")));
        if (self.dp_sgd || self.dp_fl) && !(self.epsilon > 0.0) {
            return bad("epsilon must be positive when DP is enabled");
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1)");
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return bad("clip must be positive");
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return bad("noise_multiplier must be non-negative");
        }
        if !(self.laplace_epsilon > 0.0) {
            return bad("laplace_epsilon must be positive");
        }
        if !(self.alpha1 >= 0.0) || !(self.alpha2 >= 0.0) {
            return bad("alpha1 and alpha2 must be non-negative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = PrivacyConfig::default();
        c.validate().unwrap();
        assert_eq!((c.alpha1, c.alpha2), (0.1, 1.0));
        assert!(!c.any_enabled());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = PrivacyConfig { dp_sgd: true, epsilon: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        c.epsilon = 1.0;
        c.delta = 1.0;
        assert!(c.validate().is_err());
        c.delta = 0.0;
        c.clip = 0.0;
        assert!(c.validate().is_err());
        c.clip = 1.0;
        c.laplace_epsilon = -1.0;
        assert!(c.validate().is_err());
        c.laplace_epsilon = 1.0;
        c.alpha1 = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_fail_to_parse() {
        assert!(serde_json::from_str::<PrivacyConfig>(r#"{"sigma": 1}"#).is_err());
        let c: PrivacyConfig = serde_json::from_str(r#"{"laplace": true, "bounds": "calibration"}"#).unwrap();
        assert!(c.laplace);
        assert_eq!(c.bounds, BoundsMode::Calibration);
    }
}
