//! Detector: backbone with ROI resampling, class/box head, coarse and
//! refined mask heads, reclassification head.

mod backbone;
mod config;
mod heads;
mod network;
mod ops;
mod refine;

pub use backbone::{image_to_tensor, Backbone, ImageTrace, RoiTrace};
pub use config::{BackboneConfig, ModelConfig};
pub use heads::{
    decode_box, encode_box, BoxHead, BoxTrace, HeadGrad, HeadTrace, MaskHead, ReclassHead, ReclassTrace,
    BOX_DELTA_WEIGHTS, MASK_HEAD_LAYERS,
};
pub use network::{AmodalModel, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ops::{
    amodal_feature_matching, apply_mask_attention, coarse_forward, coarse_losses, feature_matching_loss, reclass_loss,
    reclassify, refine_amodal, refine_visible, refined_amodal_loss, visible_feature_matching, CoarseLosses,
    CoarseTargets, HeadOutputs, SMOOTH_L1_BETA,
};
pub use refine::{
    matching_value, AblationVariant, AmodalMaskLoss, Attention, FeatureMatchConfig, MaskSource, PipelineOptions,
    RefinedPasses, RoiForward, RoiTargets, RoiTerms,
};
