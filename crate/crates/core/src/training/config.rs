use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::numerics::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Per-modality probability of replacing a condition with its null
    /// embedding during generator training.
    pub drop_prob: f64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch: 4,
            steps: 2000,
            seed: 0,
            weights: LossWeights::default(),
            drop_prob: 0.1,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return bad(format!(
                "drop_prob must lie in [0, 1], got {}",
                self.drop_prob
            ));
        }
        self.weights.validate()
    }

    /// The settings that shape the optimization trajectory; run length and
    /// checkpoint cadence are cleared so a resumed run may extend them.
    pub fn trajectory(&self) -> Self {
        Self {
            steps: 0,
            checkpoint_every: 0,
            ..self.clone()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}
