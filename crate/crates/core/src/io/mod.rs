//! File formats, run configuration and report writers.

mod codec;

pub use codec::*;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::LossWeights;
use crate::pipeline::{FitConfig, HistoryRow};
use crate::render::Camera;

/// Where the morphable model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    /// Basis file; a synthetic basis is generated when absent.
    pub path: Option<String>,
    pub vertices: usize,
    pub seed: u64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            path: None,
            vertices: 500,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Defaults to `2.4 * min(width, height)`.
    pub focal_length: Option<f64>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 224,
            height: 224,
            focal_length: None,
        }
    }
}

impl CameraConfig {
    pub fn camera(&self) -> Result<Camera> {
        let mut c = Camera::for_size(self.width, self.height);
        if let Some(f) = self.focal_length {
            c.focal_length = f;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Everything a command needs. Every section and field is optional in the
/// TOML file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; not part of the config hash.
    pub output: String,
    pub basis: BasisConfig,
    pub camera: CameraConfig,
    pub weights: LossWeights,
    pub fit: FitConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: "out".into(),
            basis: BasisConfig::default(),
            camera: CameraConfig::default(),
            weights: LossWeights::default(),
            fit: FitConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.fit.validate()?;
        self.dataset.validate()?;
        self.camera.camera()?;
        Ok(())
    }

    /// Sorted-key JSON of every semantically meaningful field.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        serde_json::to_string(&v).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }
}

pub const HISTORY_HEADER: [&str; 10] = [
    "iteration", "phase", "L_K", "L_GP", "L_P", "L_R", "L_O", "L_N", "L_C", "total",
];

pub fn encode_history(rows: &[HistoryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(HISTORY_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.phase.as_str().to_string(),
            r.l_k.to_string(),
            r.l_gp.to_string(),
            r.l_p.to_string(),
            r.l_r.to_string(),
            r.l_o.to_string(),
            r.l_n.to_string(),
            r.l_c.to_string(),
            r.total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    write_bytes(path, &encode_history(rows)?)
}
