//! Stand-alone forms of the head operations, for inference and inspection.
//! Training goes through [`AmodalModel::roi_forward`], which uses the same
//! primitives.

use super::heads::{encode_box, HeadTrace, MASK_HEAD_LAYERS};
use super::network::AmodalModel;
use super::refine::{masked, matching_value, resample, FeatureMatchConfig};
use crate::error::{Error, Result};
use crate::mask::{BoundingBox, Mask};
use crate::nn::loss::{bce_probs, bce_with_logits, cosine_loss, smooth_l1, softmax_cross_entropy};
use crate::nn::Tensor;
use crate::types::RoiFeature;

/// Smooth-L1 transition point for box regression.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// Background at index 0, then one logit per category.
    pub class_logits: Vec<f64>,
    pub box_deltas: Vec<f64>,
    pub coarse_amodal: Mask,
    pub coarse_visible: Mask,
}

/// Ground truth for the coarse losses of one ROI.
#[derive(Debug, Clone)]
pub struct CoarseTargets {
    /// Binary masks at mask-head resolution.
    pub amodal: Mask,
    pub visible: Mask,
    /// Class index with background at 0.
    pub class_index: usize,
    /// Regression target for foreground ROIs.
    pub box_target: Option<BoundingBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseLosses {
    pub amodal: f64,
    pub visible: f64,
    pub cls: f64,
    pub reg: f64,
}

fn check(model: &AmodalModel, f: &RoiFeature) -> Result<()> {
    let (c, r) = (model.roi_channels(), model.roi_size());
    if f.features.shape() != [c, r, r] {
        return Err(Error::Shape(format!("ROI feature {:?}, expected [{c}, {r}, {r}]", f.features.shape())));
    }
    Ok(())
}

/// `M_a^c = f_a(F ⊕ 0_k)`, `M_v^c = f_v(F)`, plus class and box outputs.
pub fn coarse_forward(model: &AmodalModel, f: &RoiFeature) -> Result<HeadOutputs> {
    check(model, f)?;
    let store = &model.store;
    let b = model.box_head.forward(store, &f.features);
    Ok(HeadOutputs {
        class_logits: b.class_logits,
        box_deltas: b.box_deltas,
        coarse_amodal: model.amodal_head.forward(store, &f.features.zero_pad_channels(model.prior_count())).mask(),
        coarse_visible: model.visible_head.forward(store, &f.features).mask(),
    })
}

pub fn coarse_losses(out: &HeadOutputs, proposal: &BoundingBox, t: &CoarseTargets) -> CoarseLosses {
    let reg = match t.box_target {
        Some(g) if t.class_index > 0 => smooth_l1(&out.box_deltas, &encode_box(proposal, &g), SMOOTH_L1_BETA).0,
        _ => 0.0,
    };
    CoarseLosses {
        amodal: bce_probs(out.coarse_amodal.data(), t.amodal.data()),
        visible: bce_probs(out.coarse_visible.data(), t.visible.data()),
        cls: softmax_cross_entropy(&out.class_logits, t.class_index).0,
        reg,
    }
}

/// `F·m` with `m` resampled to the feature's spatial size.
pub fn apply_mask_attention(f: &RoiFeature, m: &Mask) -> RoiFeature {
    let r = f.features.height();
    assert_eq!(r, f.features.width(), "ROI features are square");
    RoiFeature { features: masked(&f.features, &resample(m.data(), m.resolution(), r)), source_box: f.source_box }
}

/// `M_v^r = f_v(F·M_a^c)` with the coarse pass's `f_v`.
pub fn refine_visible(model: &AmodalModel, f: &RoiFeature, coarse_amodal: &Mask) -> Result<Mask> {
    check(model, f)?;
    Ok(model.visible_head.forward(&model.store, &apply_mask_attention(f, coarse_amodal).features).mask())
}

/// `f_rc(F·M_v^r)`: one logit per category.
pub fn reclassify(model: &AmodalModel, f: &RoiFeature, refined_visible: &Mask) -> Result<Vec<f64>> {
    check(model, f)?;
    Ok(model.reclass_head.forward(&model.store, &apply_mask_attention(f, refined_visible).features).logits)
}

/// `(λ_rc / N) Σ_i CE(logits_i, y_i)` with 0-based category labels.
pub fn reclass_loss(logits: &[Vec<f64>], labels: &[usize], lambda_rc: f64) -> f64 {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return 0.0;
    }
    let sum: f64 = logits.iter().zip(labels).map(|(l, &y)| softmax_cross_entropy(l, y).0).sum();
    lambda_rc * sum / logits.len() as f64
}

/// `(1/(N·S)) Σ_{i,j} λ_j (1 − cos(a_ij, b_ij))` over per-layer activation
/// pairs; `pairs[i][j-1]` holds layer `j` of instance `i`.
pub fn feature_matching_loss(pairs: &[[(&[f64], &[f64]); MASK_HEAD_LAYERS]], fm: &FeatureMatchConfig) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for layers in pairs {
        for ((a, b), &l) in layers.iter().zip(&fm.lambdas) {
            if l > 0.0 {
                total += l * cosine_loss(a, b).0;
            }
        }
    }
    total / (pairs.len() * MASK_HEAD_LAYERS) as f64
}

fn visible_pair(model: &AmodalModel, f: &RoiFeature, m: &Mask) -> (HeadTrace, HeadTrace) {
    let store = &model.store;
    let plain = model.visible_head.forward(store, &f.features);
    let attended = model.visible_head.forward(store, &apply_mask_attention(f, m).features);
    (plain, attended)
}

/// `L_vfm` over a batch of `(F_i, M_a,i^c)`.
pub fn visible_feature_matching(model: &AmodalModel, batch: &[(RoiFeature, Mask)], fm: &FeatureMatchConfig) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (f, m) in batch {
        check(model, f)?;
        let (a, b) = visible_pair(model, f, m);
        total += matching_value(&a, &b, fm);
    }
    Ok(total / batch.len() as f64)
}

/// `M_a^r = f_a(F·M_v^r ⊕ priors)` with the coarse pass's `f_a`.
pub fn refine_amodal(model: &AmodalModel, f: &RoiFeature, refined_visible: &Mask, priors: &[Mask]) -> Result<Mask> {
    check(model, f)?;
    let p = model.prior_tensor(priors)?;
    let x = apply_mask_attention(f, refined_visible).features.concat_channels(&p)?;
    Ok(model.amodal_head.forward(&model.store, &x).mask())
}

/// Mean refined-amodal loss over a batch of predictions and binary targets.
pub fn refined_amodal_loss(logits: &[Tensor], targets: &[Mask]) -> f64 {
    assert_eq!(logits.len(), targets.len());
    if logits.is_empty() {
        return 0.0;
    }
    let s: f64 = logits.iter().zip(targets).map(|(l, t)| bce_with_logits(l.data(), t.data()).0).sum();
    s / logits.len() as f64
}

/// `L_afm` over a batch of `(F_i, M_v,i^r)`: `f_a` on `F ⊕ 0_k` against `f_a`
/// on `F·M_v^r ⊕ 0_k`.
pub fn amodal_feature_matching(model: &AmodalModel, batch: &[(RoiFeature, Mask)], fm: &FeatureMatchConfig) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let (k, store) = (model.prior_count(), &model.store);
    let mut total = 0.0;
    for (f, m) in batch {
        check(model, f)?;
        let plain = model.amodal_head.forward(store, &f.features.zero_pad_channels(k));
        let attended = model.amodal_head.forward(store, &apply_mask_attention(f, m).features.zero_pad_channels(k));
        total += matching_value(&plain, &attended, fm);
    }
    Ok(total / batch.len() as f64)
}
