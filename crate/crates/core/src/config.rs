//! Experiment configuration files (TOML).
//!
//! ```toml
//! [experiment]
//! manifest = "data/manifest.csv"
//! backbone = "models/backbone.onnx"
//! output_dir = "runs/mc2"
//! seed = 7
//! model = "mc-effnet-2"       # or: colorspace = "LCH" for a single-branch run
//!
//! [train]                     # defaults: lr 0.001, batch 256, 100 epochs
//! epochs = 100
//!
//! [log]                       # LoG residual kernel
//! sigma = 1.0
//! kernel_size = 5
//! placement = "after_rescale" # or "before_rescale"
//! ```
//!
//! Explicit `[[branch]]` tables replace the preset. Relative paths resolve
//! against the config file's directory. The training seed is the experiment
//! seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::colorspace::ColorspaceId;
use crate::error::{Error, Result};
use crate::evalkit::TsneConfig;
use crate::fusionhead::TrainConfig;
use crate::preprocess::{LoGConfig, ModelPreset, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub manifest: PathBuf,
    pub backbone: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: Option<ModelPreset>,
    #[serde(default)]
    pub colorspace: Option<ColorspaceId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub log: LoGConfig,
    #[serde(default)]
    pub tsne: TsneConfig,
    #[serde(default, rename = "branch")]
    pub branches: Vec<PipelineConfig>,
}

/// Hash and seed recorded in every report a run writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        let digest = Sha256::digest(config_bytes);
        Provenance {
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let default_seed = TrainConfig::default().seed;
        if cfg.train.seed != default_seed && cfg.train.seed != cfg.experiment.seed {
            return Err(Error::Config(
                "set the seed under [experiment]; [train] inherits it".into(),
            ));
        }
        cfg.train.seed = cfg.experiment.seed;
        cfg.tsne.seed = cfg.experiment.seed;
        for p in [
            &mut cfg.experiment.manifest,
            &mut cfg.experiment.backbone,
            &mut cfg.experiment.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file and the provenance of its exact bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Provenance)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text =
            std::str::from_utf8(&bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = ExperimentConfig::parse(text, base)?;
        let prov = Provenance::new(&bytes, cfg.experiment.seed);
        Ok((cfg, prov))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let chosen = [e.model.is_some(), e.colorspace.is_some(), !self.branches.is_empty()]
            .iter()
            .filter(|&&b| b)
            .count();
        if chosen > 1 {
            return Err(Error::Config(
                "choose one of experiment.model, experiment.colorspace or [[branch]] tables".into(),
            ));
        }
        self.train.validate()?;
        self.log.validate()?;
        for b in self.pipelines() {
            b.validate()?;
        }
        Ok(())
    }

    /// Branch pipelines in head order. Defaults to the LoG-residual preset.
    pub fn pipelines(&self) -> Vec<PipelineConfig> {
        if !self.branches.is_empty() {
            return self.branches.clone();
        }
        if let Some(space) = self.experiment.colorspace {
            return vec![PipelineConfig {
                log: self.log,
                ..PipelineConfig::single(space)
            }];
        }
        self.experiment
            .model
            .unwrap_or(ModelPreset::McEffnet2)
            .branches(self.log)
    }

    /// Fails unless the manifest and backbone files exist.
    pub fn check_inputs(&self) -> Result<()> {
        for (what, p) in [
            ("manifest", &self.experiment.manifest),
            ("backbone", &self.experiment.backbone),
        ] {
            if !p.is_file() {
                return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Cache file of one branch.
    pub fn cache_path(&self, pipeline: &PipelineConfig) -> PathBuf {
        self.experiment
            .output_dir
            .join("features")
            .join(format!("{}.mcef", pipeline.branch))
    }
}
