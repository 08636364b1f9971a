use super::config::LossToggles;
use crate::error::{Error, Result};
use crate::mask::{mask_iou, Mask};

/// Term names in report order; also the `term` column of loss curves.
pub const TERM_NAMES: [&str; 9] = [
    "cls",
    "reg",
    "amodal_coarse",
    "visible_coarse",
    "amodal_refined",
    "visible_refined",
    "reclass",
    "amodal_fm",
    "visible_fm",
];

/// Batch loss split by term. Refined-pass terms already carry instance
/// weights; `total` is their plain sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub reg: f64,
    pub amodal_coarse: f64,
    pub visible_coarse: f64,
    pub amodal_refined: f64,
    pub visible_refined: f64,
    pub reclass: f64,
    pub amodal_fm: f64,
    pub visible_fm: f64,
}

impl LossReport {
    pub fn from_array(v: [f64; 9]) -> Self {
        let [cls, reg, amodal_coarse, visible_coarse, amodal_refined, visible_refined, reclass, amodal_fm, visible_fm] = v;
        Self { cls, reg, amodal_coarse, visible_coarse, amodal_refined, visible_refined, reclass, amodal_fm, visible_fm }
    }

    pub fn as_array(&self) -> [f64; 9] {
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

    pub fn terms(&self) -> impl Iterator<Item = (&'static str, f64)> {
        TERM_NAMES.into_iter().zip(self.as_array())
    }

    pub fn get(&self, term: &str) -> Option<f64> {
        if term == "total" {
            return Some(self.total());
        }
        self.terms().find(|(n, _)| *n == term).map(|(_, v)| v)
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }

    /// Fails on the first non-finite term, naming it.
    pub fn check_finite(&self, iteration: usize) -> Result<()> {
        match self.terms().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFiniteLoss { term, iteration }),
            None => Ok(()),
        }
    }
}

/// Zeroes disabled terms; enabled terms pass through unchanged.
pub fn total_loss(terms: &LossReport, toggles: &LossToggles) -> LossReport {
    let mut v = terms.as_array();
    for (x, on) in v.iter_mut().zip(toggles.as_array()) {
        if !on {
            *x = 0.0;
        }
    }
    LossReport::from_array(v)
}

/// Multipliers for one instance's refined-pass losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceWeight {
    /// Scales the refined amodal loss and amodal feature matching.
    pub amodal_weight: f64,
    /// Scales the refined visible loss, visible feature matching and
    /// reclassification.
    pub visible_weight: f64,
}

/// `min(1, iteration / W)`; 1 when `W` is 0.
pub fn warmup_ramp(iteration: usize, warmup_iters: usize) -> f64 {
    if warmup_iters == 0 {
        1.0
    } else {
        (iteration as f64 / warmup_iters as f64).min(1.0)
    }
}

/// `ramp(iteration) × IoU(coarse, GT)` for each task; masks share a resolution.
pub fn compute_instance_weights(
    iteration: usize,
    warmup_iters: usize,
    coarse_amodal: &Mask,
    coarse_visible: &Mask,
    gt_amodal: &Mask,
    gt_visible: &Mask,
) -> Result<InstanceWeight> {
    let ramp = warmup_ramp(iteration, warmup_iters);
    Ok(InstanceWeight {
        amodal_weight: (ramp * mask_iou(coarse_amodal, gt_amodal)?).clamp(0.0, 1.0),
        visible_weight: (ramp * mask_iou(coarse_visible, gt_visible)?).clamp(0.0, 1.0),
    })
}
