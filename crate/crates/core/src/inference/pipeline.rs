use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::nms::{nms_indices, rescore};
use crate::error::{Error, Result};
use crate::mask::{paste_mask, BoundingBox, Mask};
use crate::model::{decode_box, image_to_tensor, AblationVariant, AmodalModel, ImageTrace, PipelineOptions, RoiForward};
use crate::nn::loss::softmax;
use crate::shape_prior::ShapeCodebook;
use crate::types::{CategoryId, Detection};

/// Dense anchor stage used when the model does not run on ground-truth boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Square anchor side lengths in pixels.
    pub sizes: Vec<f64>,
    pub stride: usize,
    /// Minimum foreground probability.
    pub score_threshold: f64,
    /// Class-agnostic suppression among proposals.
    pub nms_iou: f64,
    pub max_proposals: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { sizes: vec![12.0, 20.0, 28.0, 36.0], stride: 4, score_threshold: 0.5, nms_iou: 0.7, max_proposals: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceOptions {
    /// Overrides the checkpoint's refinement wiring when set.
    pub variant: Option<AblationVariant>,
    /// Overrides the checkpoint's shape-prior post-processing when set.
    pub rescoring: Option<bool>,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub proposals: ProposalConfig,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            variant: None,
            rescoring: None,
            nms_iou: 0.5,
            score_threshold: 0.0,
            max_detections: 100,
            proposals: ProposalConfig::default(),
        }
    }
}

impl InferenceOptions {
    /// Checkpoint options with this run's overrides applied.
    pub fn resolve(&self, trained: &PipelineOptions) -> PipelineOptions {
        let mut p = *trained;
        if let Some(v) = self.variant {
            p.variant = v;
        }
        if let Some(r) = self.rescoring {
            p.shape_prior_postprocess = r;
        }
        p
    }
}

/// A detection with the intermediate values behind its score.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// `class_score` holds the final ranking score.
    pub detection: Detection,
    pub proposal: BoundingBox,
    pub class_prob: f64,
    pub reclass_prob: Option<f64>,
    pub similarity: Option<f64>,
    /// Coarse amodal mask in image space.
    pub coarse_amodal: Mask,
}

/// Read-only inference context.
pub struct Detector<'a> {
    pub model: &'a AmodalModel,
    pub pipeline: PipelineOptions,
    pub codebook: Option<&'a ShapeCodebook>,
    pub options: InferenceOptions,
}

impl<'a> Detector<'a> {
    pub fn new(
        model: &'a AmodalModel,
        trained: &PipelineOptions,
        codebook: Option<&'a ShapeCodebook>,
        options: InferenceOptions,
    ) -> Result<Self> {
        let pipeline = options.resolve(trained);
        if (pipeline.uses_priors() || pipeline.shape_prior_postprocess) && codebook.is_none() {
            return Err(Error::Config("this pipeline needs a shape-prior codebook".into()));
        }
        Ok(Self { model, pipeline, codebook, options })
    }

    fn proposals(&self, trace: &ImageTrace, gt_boxes: Option<&[BoundingBox]>) -> Vec<BoundingBox> {
        let (h, w) = trace.image_size();
        if self.model.config.backbone.use_gt_boxes {
            if let Some(b) = gt_boxes {
                return b.iter().filter_map(|b| b.clip(w, h)).collect();
            }
        }
        let p = &self.options.proposals;
        let (model, store) = (self.model, &self.model.store);
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for &s in &p.sizes {
            for cy in (0..h).step_by(p.stride.max(1)) {
                for cx in (0..w).step_by(p.stride.max(1)) {
                    let (x, y) = (cx as f64 + 0.5, cy as f64 + 0.5);
                    let anchor = BoundingBox { x_min: x - s / 2.0, y_min: y - s / 2.0, x_max: x + s / 2.0, y_max: y + s / 2.0 };
                    let Some(anchor) = anchor.clip(w, h) else { continue };
                    let roi = model.backbone.roi_forward(store, trace, &anchor);
                    let out = model.box_head.forward(store, &roi.feature);
                    let fg = 1.0 - softmax(&out.class_logits)[0];
                    if fg < p.score_threshold {
                        continue;
                    }
                    if let Some(b) = decode_box(&anchor, &out.box_deltas).clip(w, h) {
                        boxes.push(b);
                        scores.push(fg);
                    }
                }
            }
        }
        let mut keep = nms_indices(&boxes, &scores, p.nms_iou);
        keep.truncate(p.max_proposals);
        keep.into_iter().map(|i| boxes[i]).collect()
    }

    /// Runs the ROI graph on one box with the predicted category's priors.
    pub fn roi(&self, trace: &ImageTrace, bbox: &BoundingBox) -> Result<(Vec<f64>, CategoryId, RoiForward)> {
        let (model, store) = (self.model, &self.model.store);
        let roi = model.backbone.roi_forward(store, trace, bbox);
        let probs = softmax(&model.box_head.forward(store, &roi.feature).class_logits);
        let label = (1..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).expect("at least one category") - 1;
        let category = model.categories[label];
        let (codebook, k) = (self.codebook, model.prior_count());
        let mut priors = |m: &Mask| -> Result<Vec<Mask>> {
            codebook.ok_or_else(|| Error::Config("no codebook loaded".into()))?.shape_prior_search(m, category, k)
        };
        let fwd = model.roi_forward(&roi.feature, &self.pipeline, &mut priors)?;
        Ok((probs, category, fwd))
    }

    /// Scored candidates before suppression.
    pub fn candidates(&self, image: &RgbImage, gt_boxes: Option<&[BoundingBox]>) -> Result<Vec<Candidate>> {
        let trace = self.model.backbone.forward_image(&self.model.store, &image_to_tensor(image));
        let canvas = (image.height() as usize, image.width() as usize);
        let mut out = Vec::new();
        for proposal in self.proposals(&trace, gt_boxes) {
            let (probs, category, fwd) = self.roi(&trace, &proposal)?;
            let label = self.model.label_of(category)?;
            let class_prob = probs[label + 1];
            let reclass_prob = self
                .pipeline
                .uses_reclass()
                .then(|| fwd.reclass_logits().map(|l| softmax(l)[label]))
                .flatten();
            let mut score = class_prob * reclass_prob.unwrap_or(1.0);
            let refined = fwd.amodal_mask();
            let similarity = match (self.pipeline.shape_prior_postprocess, self.codebook) {
                (true, Some(cb)) => Some(cb.shape_similarity(&refined, category)?),
                _ => None,
            };
            if let Some(s) = similarity {
                score = rescore(score, s);
            }
            let amodal = paste_mask(&refined, &proposal, canvas).binarize();
            let visible = paste_mask(&fwd.visible_mask(), &proposal, canvas).binarize().intersect(&amodal)?;
            let coarse_amodal = paste_mask(&fwd.coarse_amodal.mask(), &proposal, canvas).binarize();
            out.push(Candidate {
                detection: Detection {
                    bbox: BoundingBox::from_mask(&amodal).unwrap_or(proposal),
                    category_id: category,
                    class_score: score.clamp(0.0, 1.0),
                    amodal_mask: amodal,
                    visible_mask: visible,
                },
                proposal,
                class_prob,
                reclass_prob,
                similarity,
                coarse_amodal,
            });
        }
        Ok(out)
    }

    /// Candidates above the score threshold after per-category NMS, best first.
    pub fn detect(&self, image: &RgbImage, gt_boxes: Option<&[BoundingBox]>) -> Result<Vec<Candidate>> {
        let cands: Vec<Candidate> = self
            .candidates(image, gt_boxes)?
            .into_iter()
            .filter(|c| c.detection.class_score >= self.options.score_threshold)
            .collect();
        let mut keep = Vec::new();
        let mut cats: Vec<CategoryId> = cands.iter().map(|c| c.detection.category_id).collect();
        cats.sort_unstable();
        cats.dedup();
        for cat in cats {
            let idx: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].detection.category_id == cat).collect();
            let boxes: Vec<BoundingBox> = idx.iter().map(|&i| cands[i].detection.bbox).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| cands[i].detection.class_score).collect();
            keep.extend(nms_indices(&boxes, &scores, self.options.nms_iou).into_iter().map(|j| idx[j]));
        }
        // stable on index so equal scores keep proposal order
        keep.sort_by(|&a, &b| cands[b].detection.class_score.total_cmp(&cands[a].detection.class_score).then(a.cmp(&b)));
        keep.truncate(self.options.max_detections);
        Ok(keep.into_iter().map(|i| cands[i].clone()).collect())
    }

    pub fn infer(&self, image: &RgbImage, gt_boxes: Option<&[BoundingBox]>) -> Result<Vec<Detection>> {
        Ok(self.detect(image, gt_boxes)?.into_iter().map(|c| c.detection).collect())
    }
}

/// One-shot form of [`Detector::infer`].
pub fn infer(
    image: &RgbImage,
    gt_boxes: Option<&[BoundingBox]>,
    model: &AmodalModel,
    trained: &PipelineOptions,
    codebook: Option<&ShapeCodebook>,
    options: &InferenceOptions,
) -> Result<Vec<Detection>> {
    Detector::new(model, trained, codebook, options.clone())?.infer(image, gt_boxes)
}

impl InferenceOptions {
    /// Suppression and cut-offs taken from an evaluation config.
    pub fn from_eval(cfg: &super::eval::EvalConfig) -> Self {
        Self {
            nms_iou: cfg.nms_iou,
            score_threshold: cfg.score_threshold,
            max_detections: cfg.max_detections,
            ..Self::default()
        }
    }
}

/// Runs `detector` over every scene (ground-truth boxes are offered as
/// proposals) and scores the result.
pub fn evaluate_detector(
    detector: &Detector,
    dataset: &crate::dataset::Dataset,
    cfg: &super::eval::EvalConfig,
) -> Result<(super::eval::EvalReport, Vec<Vec<Detection>>)> {
    let mut dets = Vec::with_capacity(dataset.scenes.len());
    let mut gts = Vec::with_capacity(dataset.scenes.len());
    for scene in &dataset.scenes {
        let boxes: Vec<BoundingBox> = scene.instances.iter().map(|a| a.bbox).collect();
        dets.push(detector.infer(&scene.image, Some(&boxes))?);
        gts.push(scene.instances.clone());
    }
    Ok((super::eval::evaluate(&dets, &gts, cfg)?, dets))
}
