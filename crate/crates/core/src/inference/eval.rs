//! COCO-protocol mask AP/AR.
//!
//! Per image and category, detections (best first, at most `max_detections`)
//! greedily claim the unmatched ground truth of highest IoU at or above each
//! threshold. Ground truth outside the evaluated subset is "ignored": a
//! detection matched to it counts neither way. Precision is made monotone
//! and read at 101 recall points; categories without ground truth are left
//! out of the mean.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_iou, Mask};
use crate::types::{CategoryId, Detection, InstanceAnnotation};

/// Which mask pair is compared when matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchOn {
    Amodal,
    Visible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Ground truth above this occlusion rate forms the occluded subset.
    pub occlusion_cutoff: f64,
    pub nms_iou: f64,
    /// Detections scoring below this are dropped before NMS.
    pub score_threshold: f64,
    pub max_detections: usize,
    pub match_on: MatchOn,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            occlusion_cutoff: 0.15,
            nms_iou: 0.5,
            score_threshold: 0.0,
            max_detections: 100,
            match_on: MatchOn::Amodal,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.iou_thresholds.is_empty() || !self.iou_thresholds.iter().all(|&t| in_unit(t)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1)".into()));
        }
        if !in_unit(self.occlusion_cutoff) || !in_unit(self.nms_iou) {
            return Err(Error::Config("occlusion cutoff and NMS IoU must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.score_threshold) || self.max_detections == 0 {
            return Err(Error::Config("score threshold must lie in [0, 1) and max_detections be positive".into()));
        }
        Ok(())
    }
}

/// AP averaged over thresholds, AP at 0.5 and 0.75, AR at the detection cap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub amodal: MetricSet,
    pub visible: MetricSet,
    /// Amodal-matched AP over ground truth above the occlusion cutoff.
    pub ap_occluded: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "AP,AP50,AP75,AR,AP_occluded,visible_AP,visible_AP50,visible_AP75,visible_AR";

    pub fn csv_fields(&self) -> [f64; 9] {
        let (a, v) = (&self.amodal, &self.visible);
        [a.ap, a.ap50, a.ap75, a.ar, self.ap_occluded, v.ap, v.ap50, v.ap75, v.ar]
    }

    pub fn mean(reports: &[EvalReport]) -> EvalReport {
        let n = reports.len().max(1) as f64;
        let mut acc = [0.0; 9];
        for r in reports {
            acc.iter_mut().zip(r.csv_fields()).for_each(|(a, v)| *a += v / n);
        }
        let [ap, ap50, ap75, ar, ap_occluded, vap, vap50, vap75, var] = acc;
        EvalReport {
            amodal: MetricSet { ap, ap50, ap75, ar },
            visible: MetricSet { ap: vap, ap50: vap50, ap75: vap75, ar: var },
            ap_occluded,
        }
    }

    pub fn pretty(&self) -> String {
        let (a, v) = (&self.amodal, &self.visible);
        format!(
            "            AP      AP50    AP75    AR\n\
             amodal   {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n\
             visible  {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n\
             AP(Occluded) {:.4}",
            a.ap, a.ap50, a.ap75, a.ar, v.ap, v.ap50, v.ap75, v.ar, self.ap_occluded
        )
    }
}

/// Precision at each of the 101 recall points plus final recall, for one
/// category at one threshold. `None` when the category has no counted GT.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: f64,
}

impl PrCurve {
    pub fn ap(&self) -> f64 {
        self.precision.iter().sum::<f64>() / self.precision.len() as f64
    }
}

const RECALL_POINTS: usize = 101;

/// Scored detections of one image and category, with IoU against each GT.
struct ImageCategory {
    scores: Vec<f64>,
    /// `ious[d][g]`.
    ious: Vec<Vec<f64>>,
    /// GT flagged as outside the evaluated subset.
    ignored: Vec<bool>,
}

/// Match results for one image/category/threshold: per detection (in score
/// order) `Some(is_ignored)` if matched, and whether it is ignored overall.
fn match_image(ic: &ImageCategory, threshold: f64) -> Vec<(f64, bool, bool)> {
    // counted GT first; stable so equal flags keep input order
    let mut gt_order: Vec<usize> = (0..ic.ignored.len()).collect();
    gt_order.sort_by_key(|&g| ic.ignored[g]);
    let mut taken = vec![false; ic.ignored.len()];
    let mut out = Vec::with_capacity(ic.scores.len());
    for (d, &score) in ic.scores.iter().enumerate() {
        let mut best = threshold.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for &g in &gt_order {
            if taken[g] {
                continue;
            }
            if let Some(prev) = m {
                if !ic.ignored[prev] && ic.ignored[g] {
                    break;
                }
            }
            if ic.ious[d][g] < best {
                continue;
            }
            best = ic.ious[d][g];
            m = Some(g);
        }
        match m {
            Some(g) => {
                taken[g] = true;
                out.push((score, true, ic.ignored[g]));
            }
            None => out.push((score, false, false)),
        }
    }
    out
}

fn pr_curve(images: &[ImageCategory], threshold: f64) -> Option<PrCurve> {
    let n_gt: usize = images.iter().map(|ic| ic.ignored.iter().filter(|&&i| !i).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, bool)> = Vec::new();
    for ic in images {
        for (score, matched, ignored) in match_image(ic, threshold) {
            if !ignored {
                dets.push((score, matched));
            }
        }
    }
    // stable: equal scores keep image order
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut rc = Vec::with_capacity(dets.len());
    let mut pr = Vec::with_capacity(dets.len());
    for &(_, matched) in &dets {
        if matched {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rc.push(tp / n_gt as f64);
        pr.push(tp / (tp + fp));
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let precision = (0..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            let idx = rc.partition_point(|&v| v < r);
            pr.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    Some(PrCurve { precision, recall: rc.last().copied().unwrap_or(0.0) })
}

fn mask_of(d: &Detection, on: MatchOn) -> &Mask {
    match on {
        MatchOn::Amodal => &d.amodal_mask,
        MatchOn::Visible => &d.visible_mask,
    }
}

fn gt_mask_of(g: &InstanceAnnotation, on: MatchOn) -> &Mask {
    match on {
        MatchOn::Amodal => &g.amodal_mask,
        MatchOn::Visible => &g.visible_mask,
    }
}

fn build(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<InstanceAnnotation>],
    category: CategoryId,
    on: MatchOn,
    max_detections: usize,
    counted: &dyn Fn(&InstanceAnnotation) -> bool,
) -> Result<Vec<ImageCategory>> {
    let mut out = Vec::with_capacity(detections.len());
    for (dets, gts) in detections.iter().zip(ground_truth) {
        let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.category_id == category).collect();
        ds.sort_by(|a, b| b.class_score.total_cmp(&a.class_score));
        ds.truncate(max_detections);
        let gs: Vec<&InstanceAnnotation> = gts.iter().filter(|g| g.category_id == category).collect();
        let ious = ds
            .iter()
            .map(|d| gs.iter().map(|g| mask_iou(mask_of(d, on), gt_mask_of(g, on))).collect::<Result<Vec<f64>>>())
            .collect::<Result<_>>()?;
        out.push(ImageCategory {
            scores: ds.iter().map(|d| d.class_score).collect(),
            ious,
            ignored: gs.iter().map(|g| !counted(g)).collect(),
        });
    }
    Ok(out)
}

fn categories(detections: &[Vec<Detection>], ground_truth: &[Vec<InstanceAnnotation>]) -> BTreeSet<CategoryId> {
    detections
        .iter()
        .flatten()
        .map(|d| d.category_id)
        .chain(ground_truth.iter().flatten().map(|g| g.category_id))
        .collect()
}

/// Precision-recall curve of one category at one IoU threshold.
pub fn category_pr_curve(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<InstanceAnnotation>],
    category: CategoryId,
    threshold: f64,
    on: MatchOn,
    max_detections: usize,
) -> Result<Option<PrCurve>> {
    check_aligned(detections, ground_truth)?;
    let images = build(detections, ground_truth, category, on, max_detections, &|_| true)?;
    Ok(pr_curve(&images, threshold))
}

fn check_aligned(detections: &[Vec<Detection>], ground_truth: &[Vec<InstanceAnnotation>]) -> Result<()> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} images",
            detections.len(),
            ground_truth.len()
        )));
    }
    Ok(())
}

/// AP and AR over `thresholds` for GT passing `counted`.
fn metric_set(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<InstanceAnnotation>],
    cfg: &EvalConfig,
    on: MatchOn,
    counted: &dyn Fn(&InstanceAnnotation) -> bool,
) -> Result<MetricSet> {
    let cats = categories(detections, ground_truth);
    // curves[t][c]
    let mut curves: Vec<Vec<PrCurve>> = vec![Vec::new(); cfg.iou_thresholds.len()];
    for &c in &cats {
        let images = build(detections, ground_truth, c, on, cfg.max_detections, counted)?;
        for (t, &thr) in cfg.iou_thresholds.iter().enumerate() {
            if let Some(curve) = pr_curve(&images, thr) {
                curves[t].push(curve);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let ap_at = |t: usize| mean(&curves[t].iter().map(PrCurve::ap).collect::<Vec<_>>());
    let all_ap: Vec<f64> = curves.iter().flatten().map(PrCurve::ap).collect();
    let all_ar: Vec<f64> = curves.iter().flatten().map(|c| c.recall).collect();
    let at = |x: f64| cfg.iou_thresholds.iter().position(|&t| (t - x).abs() < 1e-9).map_or(0.0, ap_at);
    Ok(MetricSet { ap: mean(&all_ap), ap50: at(0.5), ap75: at(0.75), ar: mean(&all_ar) })
}

/// Metrics for index-aligned per-image detections and ground truth.
pub fn evaluate(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<InstanceAnnotation>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    check_aligned(detections, ground_truth)?;
    let all = |_: &InstanceAnnotation| true;
    let cutoff = cfg.occlusion_cutoff;
    let occluded = move |g: &InstanceAnnotation| g.occlusion_rate > cutoff;
    Ok(EvalReport {
        amodal: metric_set(detections, ground_truth, cfg, MatchOn::Amodal, &all)?,
        visible: metric_set(detections, ground_truth, cfg, MatchOn::Visible, &all)?,
        ap_occluded: metric_set(detections, ground_truth, cfg, MatchOn::Amodal, &occluded)?.ap,
    })
}
