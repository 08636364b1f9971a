use crate::error::{Error, Result};
use crate::mask::{occlusion_rate, BoundingBox, Mask};
use crate::nn::Tensor;

/// Spatial size of every ROI feature block.
pub const ROI_SIZE: usize = 14;
/// Resolution of predicted ROI masks (2× the ROI feature size).
pub const MASK_SIZE: usize = 28;

pub type CategoryId = u32;

/// Ground truth for one object: its full (amodal) silhouette and the part of
/// it that is actually visible.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub category_id: CategoryId,
    pub bbox: BoundingBox,
    pub amodal_mask: Mask,
    pub visible_mask: Mask,
    pub occlusion_rate: f64,
}

impl InstanceAnnotation {
    /// Builds an annotation from image-space binary masks; the box is the
    /// tight box of the amodal mask.
    pub fn new(category_id: CategoryId, amodal_mask: Mask, visible_mask: Mask) -> Result<Self> {
        if !amodal_mask.is_binary() || !visible_mask.is_binary() {
            return Err(Error::InvalidAnnotation("ground-truth masks must be binary".into()));
        }
        if !visible_mask.is_subset_of(&amodal_mask) {
            return Err(Error::InvalidAnnotation("visible mask is not contained in amodal mask".into()));
        }
        let occlusion_rate = occlusion_rate(&visible_mask, &amodal_mask)?;
        let bbox = BoundingBox::from_mask(&amodal_mask)
            .ok_or_else(|| Error::InvalidAnnotation("empty amodal mask".into()))?;
        Ok(Self { category_id, bbox, amodal_mask, visible_mask, occlusion_rate })
    }
}

/// Feature block (channels × 14 × 14) for one region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub features: Tensor,
    pub source_box: BoundingBox,
}

impl RoiFeature {
    pub fn channels(&self) -> usize {
        self.features.channels()
    }
}

/// Final output for one detected object. Masks are in image space.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub category_id: CategoryId,
    pub class_score: f64,
    pub amodal_mask: Mask,
    pub visible_mask: Mask,
}
