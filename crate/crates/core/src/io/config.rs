//! TOML run configuration.
//!
//! ```toml
//! output_dir = "runs/resnet20-v1"   # default "runs"
//!
//! [model]
//! preset = "resnet20"               # tiny, tiny4, resnet20/32/44/56, vgg16, resnet50, densenet121
//! [model.topology]
//! kind = "v1"                       # baseline | v1 | v2
//! split_points = [0, 1]
//! attention = { kind = "se", reduction = 4 }
//!
//! [train]
//! epochs = 40                       # every other key has a default, see TrainConfig
//!
//! [data]
//! kind = "cifar10"                  # or "synthetic"
//! dir = "data/cifar-10-batches-bin"
//! ```
//!
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cifar;
use super::synthetic::{gen_synthetic, SyntheticSpec};
use crate::blocks::BackboneSpec;
use crate::branch::{ModelDesc, Topology};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    #[serde(default = "baseline")]
    pub topology: Topology,
}

fn baseline() -> Topology {
    Topology::Baseline
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Cifar10 {
        dir: PathBuf,
        /// Keep the first `k` training images of every class.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_per_class: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_per_class: Option<usize>,
        #[serde(default = "cifar_mean")]
        mean: [f32; 3],
        #[serde(default = "cifar_std")]
        std: [f32; 3],
    },
    /// Train set drawn with `seed`, test set with `seed + 1`.
    Synthetic {
        num_classes: usize,
        per_class: usize,
        test_per_class: usize,
        size: usize,
        #[serde(default = "three")]
        channels: usize,
        #[serde(default)]
        noise: f32,
        #[serde(default)]
        seed: u64,
    },
}

fn cifar_mean() -> [f32; 3] {
    cifar::MEAN
}

fn cifar_std() -> [f32; 3] {
    cifar::STD
}

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl DataConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            DataConfig::Cifar10 { .. } => cifar::CLASSES,
            DataConfig::Synthetic { num_classes, .. } => *num_classes,
        }
    }

    /// Train and test sets. Relative CIFAR paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Cifar10 {
                dir,
                train_per_class,
                test_per_class,
                mean,
                std,
            } => cifar::load_cifar10(&base.join(dir), *mean, *std, (*train_per_class, *test_per_class)),
            &DataConfig::Synthetic {
                num_classes,
                per_class,
                test_per_class,
                size,
                channels,
                noise,
                seed,
            } => {
                let spec = |per_class, seed| SyntheticSpec {
                    num_classes,
                    per_class,
                    size,
                    channels,
                    noise,
                    seed,
                };
                Ok((
                    gen_synthetic(&spec(per_class, seed))?,
                    gen_synthetic(&spec(test_per_class, seed.wrapping_add(1)))?,
                ))
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn backbone(&self) -> Result<BackboneSpec> {
        let mut spec = BackboneSpec::preset(&self.model.preset, self.data.num_classes())?;
        if let DataConfig::Synthetic { size, channels, .. } = self.data {
            spec.input_size = size;
            spec.in_channels = channels;
        }
        Ok(spec)
    }

    pub fn model_desc(&self) -> Result<ModelDesc> {
        Ok(ModelDesc {
            backbone: self.backbone()?,
            topology: self.model.topology.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let desc = self.model_desc()?;
        desc.backbone.block_shapes()?;
        self.train.loss.resolve(desc.topology.num_branches())?;
        Ok(())
    }
}
