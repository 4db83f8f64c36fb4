//! Run configuration, its hash, and output-directory resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_cifar_binary, Dataset, Split, SyntheticSpec};
use crate::distill::Stage2Config;
use crate::eval::{AffConfig, SlfConfig};
use crate::models::EncoderConfig;
use crate::pretrain::Stage1Config;
use crate::tensor::Real;
use crate::{Error, Result};

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "DEACL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic {
        n_per_class: usize,
        test_per_class: usize,
        classes: usize,
        #[serde(default = "one")]
        channels: usize,
        #[serde(default = "sixteen")]
        size: usize,
        #[serde(default = "default_noise")]
        noise: Real,
        /// Data seed; the run's master seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar { dir: PathBuf },
}

fn one() -> usize {
    1
}

fn sixteen() -> usize {
    16
}

fn default_noise() -> Real {
    0.08
}

impl DataSource {
    pub fn synthetic(n_per_class: usize, test_per_class: usize, classes: usize) -> Self {
        DataSource::Synthetic {
            n_per_class,
            test_per_class,
            classes,
            channels: 1,
            size: 16,
            noise: default_noise(),
            seed: None,
        }
    }

    /// Train and test splits.
    pub fn load(&self, master_seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic {
                n_per_class,
                test_per_class,
                classes,
                channels,
                size,
                noise,
                seed,
            } => {
                let seed = seed.unwrap_or(master_seed);
                let mk = |n, split| {
                    let mut s = SyntheticSpec::new(n, *classes, seed);
                    s.channels = *channels;
                    s.size = *size;
                    s.noise = *noise;
                    s.split = split;
                    s.generate()
                };
                Ok((mk(*n_per_class, Split::Train)?, mk(*test_per_class, Split::Test)?))
            }
            DataSource::Cifar { dir } => {
                let mut parts = Vec::new();
                for i in 1..=5 {
                    parts.push(load_cifar_binary(&dir.join(format!("data_batch_{i}.bin")), Split::Train)?);
                }
                let train = Dataset::concat(&parts)?;
                let test = load_cifar_binary(&dir.join("test_batch.bin"), Split::Test)?;
                Ok((train, test))
            }
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DataSource::Synthetic { channels, size, .. } => [*channels, *size, *size],
            DataSource::Cifar { .. } => [3, 32, 32],
        }
    }
}

/// Settings the method leaves unstated, with the value this crate assumes.
/// Written next to every run's config and printed by dry runs.
pub const ASSUMPTIONS: &[(&str, &str)] = &[
    ("stage1.batch_size", "desk recipe 32 (library default 64); not given for the original setup"),
    ("stage1.temperature", "desk recipe 0.2 (library default 0.5); not given for the original setup"),
    ("stage1.projector", "one hidden layer of width 2d, output d"),
    ("augmentation.strong.crop_scale", "random resized crop with area scale 0.2 to 1.0"),
    ("stage2.attack.random_start", "off"),
    ("stage2.targets", "on-the-fly: teacher applied to the clean-branch view each step"),
    ("stage2.norm_stats", "re-estimated from the student's clean batches"),
    ("slf/aff hyperparameters", "desk-scale values, not the original ones"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataSource,
    pub model: EncoderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub slf: SlfConfig,
    pub aff: AffConfig,
    /// Run AFF on the student as part of the full pipeline.
    #[serde(default)]
    pub run_aff: bool,
    /// Copy wall-clock seconds into the metrics CSV. Off by default so the
    /// metrics file is byte-stable across runs; timing always goes to
    /// `timing.json`.
    #[serde(default)]
    pub timing_in_metrics: bool,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Desk-scale recipe on the synthetic benchmark with the tiny encoder.
    pub fn desk(seed: u64) -> Self {
        let data = DataSource::synthetic(64, 64, 4);
        let [c, h, w] = data.image_shape();
        Self {
            name: "desk".into(),
            seed,
            data,
            model: EncoderConfig::tiny(c, h, w),
            stage1: Stage1Config {
                epochs: 150,
                batch_size: 32,
                lr: 0.1,
                temperature: 0.2,
                warmup_epochs: 2,
                ..Stage1Config::default()
            },
            stage2: Stage2Config {
                epochs: 50,
                batch_size: 32,
                lr: 0.4,
                ..Stage2Config::default()
            },
            slf: SlfConfig {
                epochs: 25,
                batch_size: 32,
                ..SlfConfig::default()
            },
            aff: AffConfig {
                epochs: 15,
                batch_size: 32,
                ..AffConfig::default()
            },
            run_aff: false,
            timing_in_metrics: false,
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Short recipe for smoke runs (20 + 20 epochs).
    pub fn smoke(seed: u64) -> Self {
        let mut c = Self::desk(seed);
        c.name = "smoke".into();
        c.stage1.epochs = 20;
        c.stage1.warmup_epochs = 2;
        c.stage2.epochs = 20;
        c.slf.epochs = 10;
        c.output_dir = PathBuf::from("runs/smoke");
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.input_shape() != self.data.image_shape() {
            return Err(Error::Config(format!(
                "model expects {:?} images but the data source yields {:?}",
                self.model.input_shape(),
                self.data.image_shape()
            )));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.slf.attack.validate()?;
        self.aff.attack.validate()?;
        self.aff.train_attack.validate()?;
        if self.name.is_empty() {
            return Err(Error::Config("run name must not be empty".into()));
        }
        Ok(())
    }

    /// Hash of the experiment definition. The output directory and the
    /// master seed are left out, so relocated runs and the seeds of one
    /// experiment share a hash; the seed is recorded next to it instead.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
            o.remove("seed");
        }
        let bytes = serde_json::to_vec(&v).expect("value serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// `DEACL_OUT` when set, else the configured directory.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}
