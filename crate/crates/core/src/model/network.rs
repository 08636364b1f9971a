use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::Backbone;
use super::config::ModelConfig;
use super::heads::{BoxHead, MaskHead, ReclassHead};
use super::refine::PipelineOptions;
use crate::archive::{read_archive, write_archive};
use crate::error::{Error, Result};
use crate::types::CategoryId;
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AMODALCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// All learnable parts of the detector. The amodal head `f_a` and the
/// visible head `f_v` each serve both their coarse and refined passes.
#[derive(Debug, Clone)]
pub struct AmodalModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    /// `f_a`; input is `C + k` channels, the coarse pass zero-pads the prior slots.
    pub amodal_head: MaskHead,
    /// `f_v`; input is `C` channels.
    pub visible_head: MaskHead,
    pub box_head: BoxHead,
    pub reclass_head: ReclassHead,
    /// Dataset category id behind each 0-based class label.
    pub categories: Vec<CategoryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub pipeline: PipelineOptions,
    #[serde(default)]
    pub categories: Vec<CategoryId>,
}

impl AmodalModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.backbone.roi_channels;
        let r = config.backbone.roi_size;
        let backbone = Backbone::new(&mut store, &config.backbone, &mut rng);
        let amodal_head = MaskHead::new(&mut store, "amodal_head", c + config.prior_count, config.mask_head_width, &mut rng);
        let visible_head = MaskHead::new(&mut store, "visible_head", c, config.mask_head_width, &mut rng);
        let box_head = BoxHead::new(&mut store, c, r, config.box_head_hidden, config.num_categories, &mut rng);
        let reclass_head = ReclassHead::new(&mut store, c, r, config.reclass_hidden, config.num_categories, &mut rng);
        let categories = (1..=config.num_categories as CategoryId).collect();
        Ok(Self { config: config.clone(), store, backbone, amodal_head, visible_head, box_head, reclass_head, categories })
    }

    pub fn roi_channels(&self) -> usize {
        self.config.backbone.roi_channels
    }

    pub fn roi_size(&self) -> usize {
        self.config.backbone.roi_size
    }

    /// Replaces the label-to-category map; one id per class label.
    pub fn set_categories(&mut self, ids: Vec<CategoryId>) -> Result<()> {
        if ids.len() != self.config.num_categories {
            return Err(Error::Config(format!(
                "model has {} categories but {} ids were given",
                self.config.num_categories,
                ids.len()
            )));
        }
        self.categories = ids;
        Ok(())
    }

    /// 0-based class label of a category id.
    pub fn label_of(&self, id: CategoryId) -> Result<usize> {
        self.categories.iter().position(|&c| c == id).ok_or(Error::UnknownCategory(id))
    }

    pub fn prior_count(&self) -> usize {
        self.config.prior_count
    }

    pub fn save_checkpoint(&self, path: &Path, pipeline: &PipelineOptions) -> Result<()> {
        let header = CheckpointHeader { model: self.config.clone(), pipeline: *pipeline, categories: self.categories.clone() };
        write_archive(
            BufWriter::new(File::create(path)?),
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            &header,
            self.store.params(),
        )
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, PipelineOptions)> {
        let archive = read_archive::<_, CheckpointHeader>(
            BufReader::new(File::open(path)?),
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
        )?;
        let mut model = Self::new(&archive.header.model, 0)?;
        model.store.load_from(&archive.arrays)?;
        if !archive.header.categories.is_empty() {
            model.set_categories(archive.header.categories)?;
        }
        Ok((model, archive.header.pipeline))
    }
}
