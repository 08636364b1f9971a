use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ROI_SIZE;

/// Desk-scale feature extractor: three stride-2 conv stages whose outputs
/// are ROI-aligned, concatenated and projected to `roi_channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stage_widths: Vec<usize>,
    /// ROI feature channels `C`.
    pub roi_channels: usize,
    /// Spatial size of ROI features; predicted masks are twice this.
    pub roi_size: usize,
    /// Train and evaluate mask heads on ground-truth boxes.
    pub use_gt_boxes: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { stage_widths: vec![8, 16, 16], roi_channels: 16, roi_size: ROI_SIZE, use_gt_boxes: true }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roi_channels < 8 {
            return Err(Error::Config(format!("roi_channels {} must be at least 8", self.roi_channels)));
        }
        if self.stage_widths.len() != 3 || self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("need three positive stage widths, got {:?}", self.stage_widths)));
        }
        if self.roi_size < 2 {
            return Err(Error::Config("roi_size must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_categories: usize,
    pub mask_head_width: usize,
    /// Shape priors `k` concatenated to the amodal head input.
    pub prior_count: usize,
    pub box_head_hidden: usize,
    pub reclass_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_categories: 3,
            mask_head_width: 16,
            prior_count: 16,
            box_head_hidden: 64,
            reclass_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_categories == 0 || self.mask_head_width == 0 || self.box_head_hidden == 0 || self.reclass_hidden == 0 {
            return Err(Error::Config("category count and layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn mask_size(&self) -> usize {
        2 * self.backbone.roi_size
    }
}
