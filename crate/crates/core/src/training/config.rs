use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AmodalMaskLoss, FeatureMatchConfig, ModelConfig, PipelineOptions};

/// One switch per term of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub cls: bool,
    pub reg: bool,
    pub amodal_coarse: bool,
    pub visible_coarse: bool,
    pub amodal_refined: bool,
    pub visible_refined: bool,
    pub reclass: bool,
    pub amodal_fm: bool,
    pub visible_fm: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl LossToggles {
    pub fn all(on: bool) -> Self {
        Self {
            cls: on,
            reg: on,
            amodal_coarse: on,
            visible_coarse: on,
            amodal_refined: on,
            visible_refined: on,
            reclass: on,
            amodal_fm: on,
            visible_fm: on,
        }
    }

    /// Same order as [`super::TERM_NAMES`].
    pub fn as_array(&self) -> [bool; 9] {
        [
            self.cls,
            self.reg,
            self.amodal_coarse,
            self.visible_coarse,
            self.amodal_refined,
            self.visible_refined,
            self.reclass,
            self.amodal_fm,
            self.visible_fm,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Ground-truth instances per iteration.
    pub batch_size: usize,
    pub seed: u64,
    /// Iterations over which refined-pass instance weights ramp up.
    pub warmup_iters: usize,
    /// Codebook clusters per category `K`; checked against the codebook.
    pub codebook_clusters: usize,
    /// Embedding size `D`; checked against the codebook.
    pub embedding_dim: usize,
    /// Relative box perturbation for the jittered classification ROI.
    pub box_jitter: f64,
    /// Iterations between progress log lines; 0 disables them.
    pub log_every: usize,
    pub terms: LossToggles,
    pub feature_matching: FeatureMatchConfig,
    pub amodal_loss: AmodalMaskLoss,
    pub pipeline: PipelineOptions,
    /// `prior_count` is `k`; `num_categories` must match the dataset.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 2000,
            batch_size: 4,
            seed: 0,
            warmup_iters: 500,
            codebook_clusters: 64,
            embedding_dim: 32,
            box_jitter: 0.1,
            log_every: 100,
            terms: LossToggles::default(),
            feature_matching: FeatureMatchConfig::default(),
            amodal_loss: AmodalMaskLoss::default(),
            pipeline: PipelineOptions::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn prior_count(&self) -> usize {
        self.model.prior_count
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.learning_rate, self.momentum, self.weight_decay, self.box_jitter];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("rates must be finite and non-negative".into()));
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config(format!("momentum {} must be below 1", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.codebook_clusters == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("codebook_clusters and embedding_dim must be positive".into()));
        }
        if self.pipeline.uses_priors() && self.prior_count() > self.codebook_clusters {
            return Err(Error::Config(format!(
                "k = {} exceeds the {} codebook clusters",
                self.prior_count(),
                self.codebook_clusters
            )));
        }
        self.feature_matching.validate()?;
        self.model.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}
