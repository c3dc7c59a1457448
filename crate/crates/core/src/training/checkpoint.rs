//! Checkpoints: a multi-tensor container holding parameters and Adam
//! moments, plus a JSON sidecar with the step, config hash and format
//! version.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, AnyTensor, ParamStore, Real, Tensor, TensorFile};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// `"renderer"` or `"generator"`.
    pub kind: String,
    pub step: u64,
    pub config_hash: String,
}

/// SHA-256 (hex) of the value's compact JSON form.
pub fn config_hash<S: Serialize>(cfg: &S) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: TensorFile,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, config_hash: String) -> Self {
        Self {
            tensors: TensorFile::new(),
            meta: CheckpointMeta {
                format_version: CHECKPOINT_VERSION,
                kind: kind.into(),
                step,
                config_hash,
            },
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.tensors.write(path)?;
        let mut json = serde_json::to_string_pretty(&self.meta)?;
        json.push('\n');
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "checkpoint {}",
                path.display()
            )));
        }
        let side = sidecar_path(path);
        let json = std::fs::read_to_string(&side).map_err(|_| {
            Error::MissingArtifact(format!("checkpoint metadata {}", side.display()))
        })?;
        let meta: CheckpointMeta = serde_json::from_str(&json)?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {} (expected {CHECKPOINT_VERSION})",
                meta.format_version
            )));
        }
        Ok(Self {
            tensors: TensorFile::read(path)?,
            meta,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                self.meta.kind
            )));
        }
        Ok(())
    }

    pub fn push_params<T: Real>(&mut self, prefix: &str, ps: &ParamStore<T>) -> Result<()> {
        for p in ps.iter() {
            self.tensors
                .push(format!("{prefix}{}", p.name), AnyTensor::of(&p.value))?;
        }
        Ok(())
    }

    pub fn push_adam<T: Real>(
        &mut self,
        prefix: &str,
        opt: &Adam<T>,
        ps: &ParamStore<T>,
    ) -> Result<()> {
        for ((p, m), v) in ps.iter().zip(&opt.m).zip(&opt.v) {
            self.tensors
                .push(format!("{prefix}adam.m.{}", p.name), AnyTensor::of(m))?;
            self.tensors
                .push(format!("{prefix}adam.v.{}", p.name), AnyTensor::of(v))?;
        }
        self.tensors.push(
            format!("{prefix}adam.step"),
            Tensor::<f64>::scalar(opt.step as f64),
        )
    }

    pub fn load_params<T: Real>(&self, prefix: &str, ps: &mut ParamStore<T>) -> Result<()> {
        let owned: Vec<(String, Tensor<T>)> = ps
            .iter()
            .map(|p| {
                let name = format!("{prefix}{}", p.name);
                let t = self
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::MissingArtifact(format!("checkpoint entry {name}")))?
                    .to();
                Ok((p.name.clone(), t))
            })
            .collect::<Result<_>>()?;
        ps.load_values(|n| owned.iter().find(|(k, _)| k == n).map(|(_, t)| t))
    }

    pub fn load_adam<T: Real>(
        &self,
        prefix: &str,
        config: AdamConfig,
        ps: &ParamStore<T>,
    ) -> Result<Adam<T>> {
        let mut opt = Adam::new(config, ps);
        for ((p, m), v) in ps.iter().zip(&mut opt.m).zip(&mut opt.v) {
            for (kind, slot) in [("m", m), ("v", v)] {
                let name = format!("{prefix}adam.{kind}.{}", p.name);
                let t: Tensor<T> = self.tensors.require(&name)?.to();
                if t.dims() != p.value.dims() {
                    return Err(Error::shape("load_adam", format!("{name}: {:?}", t.dims())));
                }
                *slot = t;
            }
        }
        opt.step = self
            .tensors
            .require(&format!("{prefix}adam.step"))?
            .to::<f64>()
            .item() as u64;
        Ok(opt)
    }
}
