use serde::Serialize;

use super::pipeline::{Candidate, Detector};
use crate::error::Result;
use crate::mask::{mask_iou, BoundingBox};
use crate::synth::InvariancePair;

/// A detection counts as the target at this amodal IoU or above.
pub const TARGET_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairIou {
    pub pair: usize,
    /// Refined amodal masks of the target across the two scenes.
    pub iou_full: f64,
    /// Coarse amodal masks of the target across the two scenes.
    pub iou_coarse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub n_pairs: usize,
    /// Pairs where the target was not detected in one of the scenes.
    pub n_skipped: usize,
    pub mean_iou_full: f64,
    pub mean_iou_coarse: f64,
    pub pairs: Vec<PairIou>,
}

fn find_target(dets: Vec<Candidate>, pair: &InvariancePair, second: bool) -> Result<Option<Candidate>> {
    let scene = if second { &pair.second } else { &pair.first };
    let target = &scene.instances[pair.target_index].amodal_mask;
    let mut best: Option<(f64, Candidate)> = None;
    for c in dets {
        let iou = mask_iou(&c.detection.amodal_mask, target)?;
        if iou >= TARGET_MATCH_IOU && best.as_ref().map_or(true, |(b, _)| iou > *b) {
            best = Some((iou, c));
        }
    }
    Ok(best.map(|(_, c)| c))
}

/// Compares the target's predicted amodal masks across each occluder swap.
pub fn invariance_probe(detector: &Detector, pairs: &[InvariancePair]) -> Result<InvarianceReport> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, pair) in pairs.iter().enumerate() {
        let mut found = Vec::with_capacity(2);
        for (second, scene) in [(false, &pair.first), (true, &pair.second)] {
            let boxes: Vec<BoundingBox> = scene.instances.iter().map(|a| a.bbox).collect();
            found.push(find_target(detector.detect(&scene.image, Some(&boxes))?, pair, second)?);
        }
        match (&found[0], &found[1]) {
            (Some(a), Some(b)) => out.push(PairIou {
                pair: i,
                iou_full: mask_iou(&a.detection.amodal_mask, &b.detection.amodal_mask)?,
                iou_coarse: mask_iou(&a.coarse_amodal, &b.coarse_amodal)?,
            }),
            _ => skipped += 1,
        }
    }
    let mean = |f: fn(&PairIou) -> f64| if out.is_empty() { 0.0 } else { out.iter().map(f).sum::<f64>() / out.len() as f64 };
    Ok(InvarianceReport {
        n_pairs: pairs.len(),
        n_skipped: skipped,
        mean_iou_full: mean(|p| p.iou_full),
        mean_iou_coarse: mean(|p| p.iou_coarse),
        pairs: out,
    })
}
