use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::loss::{compute_instance_weights, total_loss, InstanceWeight, LossReport, TERM_NAMES};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mask::{crop_and_resize, BoundingBox, Mask};
use crate::model::{
    encode_box, image_to_tensor, AmodalModel, BoxTrace, ImageTrace, RoiForward, RoiTargets, RoiTerms, RoiTrace,
    SMOOTH_L1_BETA,
};
use crate::nn::loss::{smooth_l1, softmax_cross_entropy};
use crate::nn::{Gradients, Sgd, Tensor};
use crate::shape_prior::ShapeCodebook;
use crate::types::InstanceAnnotation;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_CURVE_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Jittered boxes below this IoU with their ground truth fall back to it.
const MIN_JITTER_IOU: f64 = 0.5;
/// Background boxes must stay below this IoU with every ground-truth box.
const MAX_BACKGROUND_IOU: f64 = 0.3;
const BACKGROUND_TRIES: usize = 20;

/// One ground-truth instance drawn for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub scene: usize,
    pub instance: usize,
}

/// Seeded epoch-wise shuffle over every instance.
#[derive(Debug, Clone)]
struct Sampler {
    order: Vec<Sample>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(dataset: &Dataset, seed: u64) -> Self {
        let order = dataset
            .scenes
            .iter()
            .enumerate()
            .flat_map(|(s, scene)| (0..scene.instances.len()).map(move |i| Sample { scene: s, instance: i }))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self) -> Sample {
        if self.pos == 0 {
            self.order.shuffle(&mut self.rng);
        }
        let s = self.order[self.pos];
        self.pos = (self.pos + 1) % self.order.len();
        s
    }
}

/// One box fed through the ROI extractor during a batch.
#[derive(Debug, Clone)]
struct RoiJob {
    bbox: BoundingBox,
    /// Instance whose masks supervise this ROI.
    mask_instance: Option<usize>,
    /// Background at 0.
    class_index: usize,
    reg_target: Option<BoundingBox>,
}

struct MaskPass {
    fwd: RoiForward,
    targets: RoiTargets,
    raw: RoiTerms,
    weight: InstanceWeight,
}

struct JobTrace {
    roi: RoiTrace,
    boxes: BoxTrace,
    mask: Option<MaskPass>,
}

struct SceneTrace {
    image: ImageTrace,
    jobs: Vec<(RoiJob, JobTrace)>,
}

fn jitter_box<R: Rng>(b: &BoundingBox, amount: f64, canvas: (usize, usize), rng: &mut R) -> BoundingBox {
    let (cx, cy) = b.center();
    let mut u = || rng.gen_range(-amount..=amount);
    let (dx, dy, sw, sh) = (u() * b.width(), u() * b.height(), u().exp(), u().exp());
    let (w, h) = (b.width() * sw, b.height() * sh);
    let j = BoundingBox { x_min: cx + dx - 0.5 * w, y_min: cy + dy - 0.5 * h, x_max: cx + dx + 0.5 * w, y_max: cy + dy + 0.5 * h };
    match j.clip(canvas.1, canvas.0) {
        Some(c) if c.iou(b) >= MIN_JITTER_IOU => c,
        _ => *b,
    }
}

fn background_box<R: Rng>(gts: &[BoundingBox], canvas: (usize, usize), rng: &mut R) -> Option<BoundingBox> {
    let (h, w) = (canvas.0 as f64, canvas.1 as f64);
    for _ in 0..BACKGROUND_TRIES {
        let bw = rng.gen_range(8.0..=(w / 2.0).max(8.0));
        let bh = rng.gen_range(8.0..=(h / 2.0).max(8.0));
        let x = rng.gen_range(0.0..=(w - bw).max(0.0));
        let y = rng.gen_range(0.0..=(h - bh).max(0.0));
        let b = BoundingBox { x_min: x, y_min: y, x_max: x + bw, y_max: y + bh };
        if gts.iter().all(|g| g.iou(&b) < MAX_BACKGROUND_IOU) {
            return Some(b);
        }
    }
    None
}

/// Owns the model and optimizer state of one training run.
pub struct Trainer<'a> {
    pub model: AmodalModel,
    pub config: TrainConfig,
    dataset: &'a Dataset,
    codebook: Option<&'a ShapeCodebook>,
    optimizer: Sgd,
    sampler: Sampler,
    box_rng: ChaCha8Rng,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, codebook: Option<&'a ShapeCodebook>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.num_instances() == 0 {
            return Err(Error::Config("training set has no instances".into()));
        }
        if dataset.num_categories() != config.model.num_categories {
            return Err(Error::Config(format!(
                "dataset has {} categories, config expects {}",
                dataset.num_categories(),
                config.model.num_categories
            )));
        }
        let mut ids = dataset.category_ids();
        ids.sort_unstable();
        if config.pipeline.uses_priors() {
            let cb = codebook.ok_or_else(|| Error::Config("shape-prior refinement needs a codebook".into()))?;
            if cb.categories() != ids {
                return Err(Error::Config(format!(
                    "codebook categories {:?} differ from dataset categories {ids:?}",
                    cb.categories()
                )));
            }
            let meta = cb.meta();
            if meta.dim != config.embedding_dim || meta.k_requested != config.codebook_clusters {
                return Err(Error::Config(format!(
                    "codebook has D = {}, K = {}; config expects D = {}, K = {}",
                    meta.dim, meta.k_requested, config.embedding_dim, config.codebook_clusters
                )));
            }
            for &id in &ids {
                let n = cb.centroids(id)?.len();
                if n < config.prior_count() {
                    return Err(Error::Config(format!("category {id} has {n} centroids, fewer than k = {}", config.prior_count())));
                }
            }
        }
        let mut model = AmodalModel::new(&config.model, config.seed)?;
        model.set_categories(ids)?;
        let optimizer = Sgd::new(&model.store, config.learning_rate, config.momentum, config.weight_decay);
        let mut box_rng = ChaCha8Rng::seed_from_u64(config.seed);
        box_rng.set_stream(2);
        Ok(Self {
            model,
            config: config.clone(),
            dataset,
            codebook,
            optimizer,
            sampler: Sampler::new(dataset, config.seed),
            box_rng,
            iteration: 0,
        })
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn next_batch(&mut self) -> Vec<Sample> {
        (0..self.config.batch_size).map(|_| self.sampler.next()).collect()
    }

    /// Boxes for one instance: the mask ROI, a second positive for the box
    /// head and one background box when one can be found.
    fn plan(&mut self, scene: usize, instance: usize) -> Vec<RoiJob> {
        let s = &self.dataset.scenes[scene];
        let canvas = (s.image.height() as usize, s.image.width() as usize);
        let a = &s.instances[instance];
        let label = self.model.label_of(a.category_id).expect("category checked at construction") + 1;
        let gt = a.bbox.clip(canvas.1, canvas.0).unwrap_or(a.bbox);
        let jittered = jitter_box(&gt, self.config.box_jitter, canvas, &mut self.box_rng);
        let (mask_box, other) = if self.config.model.backbone.use_gt_boxes { (gt, jittered) } else { (jittered, gt) };
        let mut jobs = vec![
            RoiJob { bbox: mask_box, mask_instance: Some(instance), class_index: label, reg_target: Some(gt) },
            RoiJob { bbox: other, mask_instance: None, class_index: label, reg_target: Some(gt) },
        ];
        let gts: Vec<BoundingBox> = s.instances.iter().map(|i| i.bbox).collect();
        if let Some(b) = background_box(&gts, canvas, &mut self.box_rng) {
            jobs.push(RoiJob { bbox: b, mask_instance: None, class_index: 0, reg_target: None });
        }
        jobs
    }

    fn mask_pass(&self, feature: &Tensor, ann: &InstanceAnnotation, bbox: &BoundingBox) -> Result<MaskPass> {
        let ms = self.model.config.mask_size();
        let amodal = crop_and_resize(&ann.amodal_mask, bbox, (ms, ms)).binarize();
        let visible = crop_and_resize(&ann.visible_mask, bbox, (ms, ms)).binarize();
        let (cat, k) = (ann.category_id, self.model.prior_count());
        let codebook = self.codebook;
        let mut priors = |m: &Mask| -> Result<Vec<Mask>> {
            codebook.ok_or_else(|| Error::Config("no codebook loaded".into()))?.shape_prior_search(m, cat, k)
        };
        let fwd = self.model.roi_forward(feature, &self.config.pipeline, &mut priors)?;
        let weight = compute_instance_weights(
            self.iteration,
            self.config.warmup_iters,
            &fwd.coarse_amodal.mask(),
            &fwd.coarse_visible.mask(),
            &amodal,
            &visible,
        )?;
        let targets = RoiTargets {
            amodal: amodal.into_data(),
            visible: visible.into_data(),
            label: self.model.label_of(cat)?,
        };
        let raw = self.model.roi_losses(&fwd, &targets, &self.config.feature_matching, self.config.amodal_loss);
        Ok(MaskPass { fwd, targets, raw, weight })
    }

    /// Loss report and parameter gradients of one batch at the current
    /// iteration, without updating parameters.
    pub fn batch_gradients(&mut self, batch: &[Sample]) -> Result<(LossReport, Gradients)> {
        let mut groups: Vec<(usize, Vec<RoiJob>)> = Vec::new();
        for s in batch {
            let jobs = self.plan(s.scene, s.instance);
            match groups.iter_mut().find(|(scene, _)| *scene == s.scene) {
                Some((_, g)) => g.extend(jobs),
                None => groups.push((s.scene, jobs)),
            }
        }

        let model = &self.model;
        let store = &model.store;
        let mut traces = Vec::with_capacity(groups.len());
        for (scene, jobs) in groups {
            let sc = &self.dataset.scenes[scene];
            let image = model.backbone.forward_image(store, &image_to_tensor(&sc.image));
            let mut out = Vec::with_capacity(jobs.len());
            for job in jobs {
                let roi = model.backbone.roi_forward(store, &image, &job.bbox);
                let boxes = model.box_head.forward(store, &roi.feature);
                let mask = match job.mask_instance {
                    Some(i) => Some(self.mask_pass(&roi.feature, &sc.instances[i], &job.bbox)?),
                    None => None,
                };
                out.push((job, JobTrace { roi, boxes, mask }));
            }
            traces.push(SceneTrace { image, jobs: out });
        }

        let n = batch.len() as f64;
        let all_jobs = || traces.iter().flat_map(|t| t.jobs.iter());
        let n_cls = all_jobs().count() as f64;
        let n_pos = all_jobs().filter(|(j, _)| j.reg_target.is_some()).count().max(1) as f64;
        let mut raw = LossReport::default();
        for (job, t) in all_jobs() {
            raw.cls += softmax_cross_entropy(&t.boxes.class_logits, job.class_index).0 / n_cls;
            if let Some(g) = job.reg_target {
                raw.reg += smooth_l1(&t.boxes.box_deltas, &encode_box(&job.bbox, &g), SMOOTH_L1_BETA).0 / n_pos;
            }
            if let Some(m) = &t.mask {
                let (wa, wv) = (m.weight.amodal_weight, m.weight.visible_weight);
                raw.amodal_coarse += m.raw.amodal_coarse / n;
                raw.visible_coarse += m.raw.visible_coarse / n;
                raw.amodal_refined += wa * m.raw.amodal_refined / n;
                raw.visible_refined += wv * m.raw.visible_refined / n;
                raw.reclass += wv * m.raw.reclass / n;
                raw.amodal_fm += wa * m.raw.amodal_fm / n;
                raw.visible_fm += wv * m.raw.visible_fm / n;
            }
        }
        let toggles = self.config.terms;
        let report = total_loss(&raw, &toggles);
        report.check_finite(self.iteration)?;

        let on = |b: bool| if b { 1.0 } else { 0.0 };
        let mut grads = store.zero_grads();
        for st in &traces {
            let mut d_maps = st.image.zero_map_grads();
            for (job, t) in &st.jobs {
                let d_logits: Vec<f64> = softmax_cross_entropy(&t.boxes.class_logits, job.class_index)
                    .1
                    .into_iter()
                    .map(|g| g * on(toggles.cls) / n_cls)
                    .collect();
                let d_deltas: Vec<f64> = match job.reg_target {
                    Some(g) if toggles.reg => smooth_l1(&t.boxes.box_deltas, &encode_box(&job.bbox, &g), SMOOTH_L1_BETA)
                        .1
                        .into_iter()
                        .map(|v| v / n_pos)
                        .collect(),
                    _ => vec![0.0; 4],
                };
                let mut d_feature = model.box_head.backward(store, &t.boxes, &d_logits, &d_deltas, &mut grads);
                if let Some(m) = &t.mask {
                    let (wa, wv) = (m.weight.amodal_weight, m.weight.visible_weight);
                    let scale = RoiTerms {
                        amodal_coarse: on(toggles.amodal_coarse) / n,
                        visible_coarse: on(toggles.visible_coarse) / n,
                        amodal_refined: on(toggles.amodal_refined) * wa / n,
                        visible_refined: on(toggles.visible_refined) * wv / n,
                        reclass: on(toggles.reclass) * wv / n,
                        amodal_fm: on(toggles.amodal_fm) * wa / n,
                        visible_fm: on(toggles.visible_fm) * wv / n,
                    };
                    let d = model.roi_backward(
                        &m.fwd,
                        &m.targets,
                        &self.config.feature_matching,
                        self.config.amodal_loss,
                        &scale,
                        &mut grads,
                    );
                    d_feature.add_assign(&d);
                }
                model.backbone.roi_backward(store, &st.image, &t.roi, &d_feature, &mut d_maps, &mut grads);
            }
            model.backbone.backward_image(store, &st.image, d_maps, &mut grads);
        }
        Ok((report, grads))
    }

    /// Draws a batch, computes gradients and applies one optimizer update.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.next_batch();
        let (report, grads) = self.batch_gradients(&batch)?;
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss { term: "gradient", iteration: self.iteration });
        }
        self.optimizer.step(&mut self.model.store, &grads);
        self.iteration += 1;
        Ok(report)
    }

    pub fn into_model(self) -> AmodalModel {
        self.model
    }
}

/// Per-iteration loss reports of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub reports: Vec<LossReport>,
}

impl LossHistory {
    /// Values of one term (or `total`) by iteration.
    pub fn series(&self, term: &str) -> Option<Vec<f64>> {
        self.reports.iter().map(|r| r.get(term)).collect()
    }

    /// Long-format CSV: `iteration,term,value`, every term plus `total`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "iteration,term,value")?;
        for (it, r) in self.reports.iter().enumerate() {
            for (name, v) in r.terms().chain([("total", r.total())]) {
                writeln!(w, "{it},{name},{v}")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Trailing moving average over up to `window` values.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AmodalModel,
    pub history: LossHistory,
}

pub fn train(dataset: &Dataset, codebook: Option<&ShapeCodebook>, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, codebook, config)?;
    let mut history = LossHistory::default();
    let started = std::time::Instant::now();
    for it in 0..config.iterations {
        let r = trainer.step()?;
        if config.log_every > 0 && (it + 1) % config.log_every == 0 {
            log::info!(
                "iter {:>5}  total {:.4}  amodal_coarse {:.4}  amodal_refined {:.4}  ({:.1?})",
                it + 1,
                r.total(),
                r.amodal_coarse,
                r.amodal_refined,
                started.elapsed()
            );
        }
        history.reports.push(r);
    }
    debug_assert_eq!(TERM_NAMES.len(), 9);
    Ok(TrainOutcome { model: trainer.into_model(), history })
}

/// Trains and writes the checkpoint, loss curve and effective config into `out`.
pub fn train_to_dir(
    dataset: &Dataset,
    codebook: Option<&ShapeCodebook>,
    config: &TrainConfig,
    out: &Path,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    let outcome = train(dataset, codebook, config)?;
    outcome.model.save_checkpoint(&out.join(CHECKPOINT_FILE), &config.pipeline)?;
    outcome.history.write_csv(&out.join(LOSS_CURVE_FILE))?;
    config.save(&out.join(CONFIG_FILE))?;
    Ok(outcome)
}
