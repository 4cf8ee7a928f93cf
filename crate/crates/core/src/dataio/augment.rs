use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Rng;

/// Feature-space stand-in for modality-specific input augmentation:
/// `x' = mask * (s * (x + noise))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_std: 0.05,
            scale_lo: 0.95,
            scale_hi: 1.05,
            dropout_p: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            noise_std: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            dropout_p: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(Error::Argument(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) || !self.scale_hi.is_finite() {
            return Err(Error::Argument(format!(
                "scale range must satisfy 0 < lo <= hi, got [{}, {}]",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Argument(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }
}

/// One augmented view. Draw order: the scale, then per coordinate the noise
/// and the keep decision.
pub fn augment(x: &[f64], cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let s = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    x.iter()
        .map(|&v| {
            let noise = if cfg.noise_std > 0.0 { cfg.noise_std * rng.normal() } else { 0.0 };
            let keep = cfg.dropout_p == 0.0 || !rng.bernoulli(cfg.dropout_p);
            if keep {
                s * (v + noise)
            } else {
                0.0
            }
        })
        .collect()
}
