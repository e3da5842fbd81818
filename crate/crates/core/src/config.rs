//! Run configuration: one JSON document covering data, transform ranges,
//! backbone, pretraining, fine-tuning and output location. Unknown keys
//! are rejected; missing keys take their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::ClipParams;
use crate::error::{Error, Result};
use crate::geometry::TransformSpace;
use crate::nn::BackboneSpec;
use crate::pretrain::TrainConfig;
use crate::transfer::FinetuneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Store directory holding `manifest.json`.
    pub root: PathBuf,
    pub downsample_rate: usize,
    pub k: usize,
    pub crop_fraction: f64,
    pub input_size: usize,
    /// Fraction of each class's videos held out for evaluation.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let clip = ClipParams::default();
        Self {
            root: PathBuf::from("data/synth"),
            downsample_rate: clip.downsample_rate,
            k: clip.k,
            crop_fraction: clip.crop_fraction,
            input_size: clip.input_size,
            test_fraction: 0.2,
        }
    }
}

impl DataConfig {
    pub fn clip_params(&self) -> ClipParams {
        ClipParams {
            downsample_rate: self.downsample_rate,
            k: self.k,
            crop_fraction: self.crop_fraction,
            input_size: self.input_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub transform_space: TransformSpace,
    pub backbone: BackboneSpec,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(format!("config file {}", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Checks each section and their mutual consistency. All failures are
    /// configuration errors.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::InvalidArgument(m) | Error::Config(m) => Error::Config(m),
            other => other,
        };
        self.data.clip_params().validate().map_err(as_config)?;
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(format!(
                "data.test_fraction {} outside [0, 1)",
                self.data.test_fraction
            )));
        }
        self.transform_space.validate().map_err(as_config)?;
        self.backbone.validate().map_err(as_config)?;
        self.pretrain.validate().map_err(as_config)?;
        self.finetune.validate().map_err(as_config)?;
        if self.backbone.input_channels != self.data.k {
            return Err(Error::Config(format!(
                "backbone.input_channels {} must equal data.k {}",
                self.backbone.input_channels, self.data.k
            )));
        }
        if self.backbone.input_size != self.data.input_size {
            return Err(Error::Config(format!(
                "backbone.input_size {} must equal data.input_size {}",
                self.backbone.input_size, self.data.input_size
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
