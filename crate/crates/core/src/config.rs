//! Run configuration: a TOML file with `[model]`, `[loss]`, `[optim]`,
//! `[data]` and `[train]` sections. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Folder with `hazy/` and `gt/`; relative paths resolve against the
    /// config file's directory.
    pub train_dir: Option<PathBuf>,
    /// Generated pairs, used when `train_dir` is unset.
    pub synthetic: Option<SyntheticData>,
    /// Square crop size; `None` trains on whole images.
    pub patch: Option<usize>,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            synthetic: Some(SyntheticData {
                count: 8,
                size: 64,
                seed: 0,
            }),
            patch: Some(64),
            batch_size: 8,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many iterations even if epochs remain.
    pub max_iters: Option<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub device: String,
    /// Record elapsed seconds in the metrics file. Off by default so equal
    /// runs give byte-identical files; timings then go to `timing.csv`.
    pub log_wall_time: bool,
    /// Write `last.ckpt` every this many epochs (and always at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            max_iters: None,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            device: "cpu".into(),
            log_wall_time: false,
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, resolving relative data and output paths against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = cfg.data.train_dir.as_mut() {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if cfg.train.out_dir.is_relative() {
            cfg.train.out_dir = base.join(&cfg.train.out_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.train.device != "cpu" {
            return Err(Error::Config(format!(
                "train.device `{}` is not available; only `cpu` is supported",
                self.train.device
            )));
        }
        if self.data.batch_size == 0 {
            return Err(Error::Config("data.batch_size must be positive".into()));
        }
        if self.data.train_dir.is_none() && self.data.synthetic.is_none() {
            return Err(Error::Config("set data.train_dir or data.synthetic".into()));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
