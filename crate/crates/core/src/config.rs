//! Run configuration: one JSON document with every key required.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::ModelScale;
use crate::error::{Error, Result};
use crate::motion_generator::{GeneratorConfig, SamplerConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_identities: usize,
    pub frames_per_identity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory written by `synth-data` and read by `train`.
    pub data: String,
    /// Directory for checkpoints and loss logs.
    pub runs: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: ModelScale,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Desk-scale settings that train in minutes on one core.
    pub fn toy() -> Self {
        Self {
            scale: ModelScale::toy(),
            generator: GeneratorConfig {
                d_z: 32,
                audio_dim: 16,
                pose_dim: 6,
                gaze_dim: 2,
                cond_dim: 16,
                hidden: 64,
                depth: 2,
                heads: 4,
                mlp_ratio: 2,
                time_dim: 32,
            },
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            data: DataConfig {
                seed: 0,
                n_identities: 4,
                frames_per_identity: 16,
            },
            paths: PathsConfig {
                data: "data".into(),
                runs: "runs".into(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        self.generator.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.generator.d_z != self.scale.d_z {
            return Err(Error::Config(format!(
                "generator.d_z {} differs from scale.d_z {}",
                self.generator.d_z, self.scale.d_z
            )));
        }
        if self.data.n_identities == 0 || self.data.frames_per_identity == 0 {
            return Err(Error::Config(
                "data: identities and frames must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
