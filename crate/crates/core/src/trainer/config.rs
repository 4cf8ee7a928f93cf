use serde::{Deserialize, Serialize};

use crate::contrast::ContrastConfig;
use crate::dataio::{AugmentConfig, Protocol};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::promptattn::AttnConfig;

/// Everything that shapes a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Weight of the contrastive term relative to the task loss.
    pub lambda_task: f64,
    pub alpha: f64,
    pub tau: f64,
    pub use_prompt: bool,
    pub use_fncl: bool,
    pub use_cccl: bool,
    pub seed: u64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub metric: Metric,
    pub protocol: Protocol,
    pub eta: f64,
    pub augment: AugmentConfig,
    pub attn: AttnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            lambda_task: 1.0,
            alpha: 0.5,
            tau: 0.07,
            use_prompt: true,
            use_fncl: true,
            use_cccl: true,
            seed: 0,
            val_frac: 0.15,
            test_frac: 0.15,
            metric: Metric::Accuracy,
            protocol: Protocol::Balanced,
            eta: 0.7,
            augment: AugmentConfig::default(),
            attn: AttnConfig::default(),
        }
    }
}

/// The five component configurations of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    PromptFncl,
    PromptCccl,
    PromptOnly,
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::PromptFncl,
        Ablation::PromptCccl,
        Ablation::PromptOnly,
        Ablation::Baseline,
    ];

    /// `(use_prompt, use_fncl, use_cccl)`.
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            Ablation::Full => (true, true, true),
            Ablation::PromptFncl => (true, true, false),
            Ablation::PromptCccl => (true, false, true),
            Ablation::PromptOnly => (true, false, false),
            Ablation::Baseline => (false, false, false),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::PromptFncl => "prompt_fncl",
            Ablation::PromptCccl => "prompt_cccl",
            Ablation::PromptOnly => "prompt_only",
            Ablation::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown component config {s:?} (full, prompt_fncl, prompt_cccl, prompt_only, baseline)"
                ))
            })
    }
}

impl TrainConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        (self.use_prompt, self.use_fncl, self.use_cccl) = a.switches();
        self
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            alpha: self.alpha,
        }
    }

    /// Weights applied to `(fncl, cccl)` inside the contrastive term. With a
    /// single objective enabled it carries the whole term.
    pub fn contrast_weights(&self) -> (f64, f64) {
        match (self.use_fncl, self.use_cccl) {
            (true, true) => (self.alpha, 1.0 - self.alpha),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        pos("lr", self.lr)?;
        pos("eps_adam", self.eps_adam)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.lambda_task >= 0.0 && self.lambda_task.is_finite()) {
            return Err(Error::Config(format!("lambda_task must be >= 0, got {}", self.lambda_task)));
        }
        for (name, f) in [("val_frac", self.val_frac), ("test_frac", self.test_frac)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
        if self.val_frac + self.test_frac >= 1.0 {
            return Err(Error::Config("val_frac + test_frac leaves no training data".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Argument(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !self.use_prompt && (self.use_fncl || self.use_cccl) {
            return Err(Error::Usage(
                "conflicting switches: contrastive objectives act on generated features and need the prompt generator (add --no-fncl --no-cccl or drop --no-prompt)".into(),
            ));
        }
        self.contrast().validate()?;
        self.augment.validate()?;
        self.attn.validate()
    }
}
