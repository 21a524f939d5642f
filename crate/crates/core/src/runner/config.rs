use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{assign_gallery_split, generate_dataset, load_folder_dataset, DatasetConfig, ProtocolConfig, Sample};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_K;
use crate::models::ModelConfig;
use crate::strategies::StrategyConfig;

/// A PPM folder tree (`cat_*/inst_*/view_*.ppm`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderDataset {
    pub path: PathBuf,
    #[serde(default = "default_gallery_fraction")]
    pub gallery_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_gallery_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(DatasetConfig),
    Folder(FolderDataset),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(DatasetConfig::default())
    }
}

impl DatasetSource {
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Synthetic(c) => c.preset.name().to_string(),
            DatasetSource::Folder(f) => f.path.display().to_string(),
        }
    }

    pub fn load(&self) -> Result<Vec<Sample>> {
        match self {
            DatasetSource::Synthetic(c) => generate_dataset(c),
            DatasetSource::Folder(f) => {
                let mut samples = load_folder_dataset(&f.path)?;
                if samples.is_empty() {
                    return Err(Error::Data(format!("no images found under {}", f.path.display())));
                }
                assign_gallery_split(&mut samples, f.gallery_fraction, f.seed)?;
                Ok(samples)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub base_lr: f64,
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { momentum: 0.9, base_lr: 0.001, min_lr: 0.0 }
    }
}

/// Everything a run depends on. Serialized as JSON; unknown keys are
/// rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Drives initialization, shuffling, augmentation and memory sampling.
    pub seed: u64,
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    pub optimizer: OptimizerConfig,
    pub protocol: ProtocolConfig,
    pub k_nn: usize,
    /// Gallery used for cross-dataset evaluation after the last session.
    pub cross_dataset: Option<DatasetSource>,
    /// Number of gallery queries dumped to `neighbors.txt`.
    pub neighbor_queries: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            seed: 0,
            model: ModelConfig::default(),
            strategy: StrategyConfig::default(),
            optimizer: OptimizerConfig::default(),
            protocol: ProtocolConfig::default(),
            // galleries hold 6 views per instance at desk scale
            k_nn: 5,
            cross_dataset: None,
            neighbor_queries: 3,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// 200 epochs per session, batch 256 and k = 100.
    pub fn full_scale() -> Self {
        let mut c = ExperimentConfig::default();
        c.strategy.hyper.epochs_per_session = 200;
        c.strategy.hyper.batch_size = 256;
        c.k_nn = DEFAULT_K;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.strategy.validate()?;
        if !(self.optimizer.momentum >= 0.0 && self.optimizer.momentum < 1.0) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.optimizer.momentum)));
        }
        let (base, min) = (self.optimizer.base_lr, self.optimizer.min_lr);
        if base.is_nan() || min.is_nan() || base <= 0.0 || min < 0.0 || min > base {
            return Err(Error::Config(format!(
                "need 0 <= min_lr <= base_lr and base_lr > 0, got {} / {}",
                self.optimizer.min_lr, self.optimizer.base_lr
            )));
        }
        if self.k_nn == 0 {
            return Err(Error::Config("k_nn must be positive".into()));
        }
        if self.protocol.n_tasks == 0 {
            return Err(Error::Config("n_tasks must be positive".into()));
        }
        if let DatasetSource::Synthetic(d) = &self.dataset {
            let (c, h, w) = self.model.encoder.input;
            if (c, h, w) != (crate::datagen::CHANNELS, d.image_size, d.image_size) {
                return Err(Error::Config(format!(
                    "encoder input {:?} does not match {}x{} RGB images",
                    self.model.encoder.input, d.image_size, d.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
