//! One function per module invariant. Each drives a deterministic proptest
//! runner and panics on the first counterexample.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use amodal_core::dataset::Dataset;
use amodal_core::inference::{evaluate, nms_indices, rescore, Detector, EvalConfig, InferenceOptions};
use amodal_core::mask::{mask_iou, occlusion_rate, resize_mask, BoundingBox, Mask};
use amodal_core::model::{
    apply_mask_attention, coarse_forward, refine_amodal, refined_amodal_loss, visible_feature_matching,
    AmodalMaskLoss, AmodalModel, BackboneConfig, FeatureMatchConfig, MaskHead, ModelConfig, PipelineOptions, RoiTerms,
    MASK_HEAD_LAYERS,
};
use amodal_core::nn::{ParamId, ParamStore, Tensor};
use amodal_core::shape_prior::{
    amodal_shape_masks, build_codebook, mask_similarity, train_autoencoder, AutoencoderConfig, ShapeCodebook,
    SimilarityNorm,
};
use amodal_core::shape_prior::kmeans::{kmeans, KMeansInit, MAX_ITERATIONS};
use amodal_core::synth::{default_templates, generate_scenes, render_template, Placement, SceneSpec};
use amodal_core::training::{
    compute_instance_weights, total_loss, warmup_ramp, LossReport, LossToggles, TrainConfig, Trainer, TERM_NAMES,
};
use amodal_core::types::{RoiFeature, MASK_SIZE, ROI_SIZE};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{det_of, gt_of, rect};

type Outcome = Result<(), TestCaseError>;

fn check<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Outcome) {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    if let Err(e) = runner.run(&strategy, test) {
        panic!("{e}");
    }
}

fn binary_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w)
        .prop_map(move |v| Mask::new(h, w, v.into_iter().map(|b| b as u8 as f64).collect()).unwrap())
}

fn soft_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(0.0..=1.0f64, h * w).prop_map(move |v| Mask::new(h, w, v).unwrap())
}

fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn feature(t: Tensor) -> RoiFeature {
    RoiFeature { features: t, source_box: BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 16.0, y_max: 16.0 } }
}

fn head_ids(h: &MaskHead) -> Vec<ParamId> {
    h.convs.iter().flat_map(|c| [c.weight, c.bias]).chain([h.deconv.weight, h.deconv.bias]).collect()
}

/// A small dataset, codebook and matching training config, built once.
pub struct World {
    pub train: Dataset,
    pub codebook: ShapeCodebook,
    pub config: TrainConfig,
}

pub fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let templates = default_templates(2);
        let spec = SceneSpec { seed: 3, ..SceneSpec::default() };
        let train = Dataset::from_scenes(&templates, generate_scenes(&spec, &templates, 0, 12).unwrap());
        let by_cat = amodal_shape_masks(&train);
        let all: Vec<Mask> = by_cat.values().flatten().cloned().collect();
        let (ae, _) = train_autoencoder(&all, &AutoencoderConfig { dim: 8, epochs: 2, ..AutoencoderConfig::default() }).unwrap();
        let codebook = build_codebook(ae, &by_cat, 4, 0).unwrap();
        let config = TrainConfig {
            iterations: 3,
            batch_size: 2,
            warmup_iters: 0,
            codebook_clusters: 4,
            embedding_dim: 8,
            log_every: 0,
            model: ModelConfig {
                backbone: BackboneConfig { stage_widths: vec![4, 4, 4], roi_channels: 8, roi_size: ROI_SIZE, use_gt_boxes: true },
                num_categories: 2,
                mask_head_width: 4,
                prior_count: 2,
                box_head_hidden: 8,
                reclass_hidden: 8,
            },
            ..TrainConfig::default()
        };
        World { train, codebook, config }
    })
}

fn world_model(seed: u64) -> AmodalModel {
    let w = world();
    let mut m = AmodalModel::new(&w.config.model, seed).unwrap();
    m.set_categories(w.train.category_ids()).unwrap();
    m
}

// ---- core types ----

pub fn mask_iou_is_symmetric_bounded_and_exact() {
    check(128, (binary_mask(5, 6), binary_mask(5, 6), soft_mask(5, 6)), |(a, b, s)| {
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab == 1.0, a.binarize() == b.binarize());
        prop_assert_eq!(mask_iou(&s, &s.binarize()).unwrap(), 1.0);
        let sa = mask_iou(&s, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&sa));
        Ok(())
    });
}

pub fn resize_stays_in_unit_range() {
    let strat = (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (soft_mask(h, w), 1usize..30, 1usize..30));
    check(128, strat, |(m, th, tw)| {
        let r = resize_mask(&m, (th, tw));
        prop_assert_eq!(r.resolution(), (th, tw));
        prop_assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    });
}

pub fn clipped_boxes_are_ordered_and_inside() {
    check(256, (-30.0..90.0f64, -30.0..90.0f64, 0.01..60.0f64, 0.01..60.0f64), |(x, y, w, h)| {
        let b = BoundingBox::new(x, y, x + w, y + h).unwrap();
        if let Some(c) = b.clip(64, 48) {
            prop_assert!(c.x_min < c.x_max && c.y_min < c.y_max);
            prop_assert!(c.x_min >= 0.0 && c.y_min >= 0.0 && c.x_max <= 64.0 && c.y_max <= 48.0);
        }
        prop_assert!(BoundingBox::new(x, y, x, y + h).is_err());
        Ok(())
    });
}

pub fn annotations_are_consistent() {
    let templates = default_templates(3);
    check(24, any::<u64>(), |seed| {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let scene = generate_scenes(&spec, &templates, seed % 1000, 1).unwrap().remove(0);
        prop_assert!(!scene.instances.is_empty());
        for a in &scene.instances {
            prop_assert!(a.visible_mask.is_subset_of(&a.amodal_mask));
            prop_assert!((0.0..=1.0).contains(&a.occlusion_rate));
            let r = occlusion_rate(&a.visible_mask, &a.amodal_mask).unwrap();
            prop_assert!((r - a.occlusion_rate).abs() <= 1e-6);
            let (x, y, xm, ym) = (a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max);
            prop_assert!(x < xm && y < ym && x >= 0.0 && y >= 0.0 && xm <= 64.0 && ym <= 64.0);
        }
        Ok(())
    });
}

pub fn roi_features_have_the_configured_resolution() {
    let model = AmodalModel::new(&ModelConfig::default(), 1).unwrap();
    let strat = (any::<u64>(), prop::collection::vec((0.0..56.0f64, 0.0..56.0f64, 2.0..30.0f64, 2.0..30.0f64), 1..4));
    check(12, strat, |(seed, boxes)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = image::RgbImage::from_fn(64, 64, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]));
        let boxes: Vec<BoundingBox> =
            boxes.iter().filter_map(|&(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap().clip(64, 64)).collect();
        let feats = model.backbone.extract_roi_features(&model.store, &image, &boxes);
        prop_assert_eq!(feats.len(), boxes.len());
        for f in feats {
            prop_assert_eq!(f.features.shape(), [model.roi_channels(), ROI_SIZE, ROI_SIZE]);
        }
        Ok(())
    });
}

// ---- synthetic data ----

pub fn scenes_are_layered_by_depth() {
    let templates = default_templates(3);
    check(24, any::<u64>(), |seed| {
        let spec = SceneSpec { seed, max_instances: 5, ..SceneSpec::default() };
        let scene = generate_scenes(&spec, &templates, 7, 1).unwrap().remove(0);
        let inst = &scene.instances;
        for i in 0..inst.len() {
            prop_assert!(inst[i].visible_mask.is_subset_of(&inst[i].amodal_mask));
            for j in i + 1..inst.len() {
                prop_assert_eq!(inst[i].visible_mask.intersect(&inst[j].visible_mask).unwrap().count_on(), 0);
            }
        }
        let (h, w) = scene.instances[0].amodal_mask.resolution();
        for y in 0..h {
            for x in 0..w {
                // back-to-front order: the last instance covering a pixel owns it
                let top = (0..inst.len()).rev().find(|&i| inst[i].amodal_mask.get(y, x) >= 0.5);
                for (i, a) in inst.iter().enumerate() {
                    prop_assert_eq!(a.visible_mask.get(y, x) >= 0.5, Some(i) == top);
                }
            }
        }
        Ok(())
    });
}

pub fn scene_generation_is_deterministic() {
    let templates = default_templates(3);
    check(8, (any::<u64>(), 0u64..100), |(seed, first)| {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let a = generate_scenes(&spec, &templates, first, 2).unwrap();
        prop_assert_eq!(&a, &generate_scenes(&spec, &templates, first, 2).unwrap());
        Ok(())
    });
}

fn components(m: &Mask) -> usize {
    let (h, w) = m.resolution();
    let mut seen = vec![false; h * w];
    let mut n = 0;
    for start in 0..h * w {
        if seen[start] || m.data()[start] < 0.5 {
            continue;
        }
        n += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let near = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            for (ny, nx) in near {
                if ny < h && nx < w && !seen[ny * w + nx] && m.get(ny, nx) >= 0.5 {
                    seen[ny * w + nx] = true;
                    stack.push(ny * w + nx);
                }
            }
        }
    }
    n
}

pub fn silhouettes_are_connected_and_dense() {
    let templates = default_templates(5);
    check(64, (0usize..5, 0.0..1.0f64, 0.0..1.0f64), |(t, s, r)| {
        let tpl = &templates[t];
        let scale = tpl.scale_range.0 + s * (tpl.scale_range.1 - tpl.scale_range.0);
        let rotation = tpl.rotation_range.0 + r * (tpl.rotation_range.1 - tpl.rotation_range.0);
        let m = render_template(tpl, Placement { scale, rotation, position: (32.0, 32.0) }, (64, 64)).unwrap();
        prop_assert_eq!(components(&m), 1);
        let b = BoundingBox::from_mask(&m).unwrap();
        prop_assert!(m.count_on() as f64 >= 0.05 * b.area());
        Ok(())
    });
}

// ---- backbone and coarse heads ----

pub fn coarse_masks_are_probabilities_at_twice_roi_size() {
    let model = world_model(4);
    check(16, any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = feature(random_tensor(model.roi_channels(), ROI_SIZE, ROI_SIZE, &mut rng));
        let out = coarse_forward(&model, &f).unwrap();
        for m in [&out.coarse_amodal, &out.coarse_visible] {
            prop_assert_eq!(m.resolution(), (2 * ROI_SIZE, 2 * ROI_SIZE));
            prop_assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        prop_assert_eq!(out.class_logits.len(), model.config.num_categories + 1);
        prop_assert_eq!(MASK_HEAD_LAYERS, 5);
        Ok(())
    });
}

pub fn independently_initialized_heads_differ() {
    check(8, any::<u64>(), |seed| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = MaskHead::new(&mut store, "a", 8, 4, &mut rng);
        let b = MaskHead::new(&mut store, "b", 8, 4, &mut rng);
        let x = random_tensor(8, 6, 6, &mut rng);
        let (ya, yb) = (a.forward(&store, &x), b.forward(&store, &x));
        prop_assert_ne!(ya.logits.data(), yb.logits.data());
        Ok(())
    });
}

// ---- visible module ----

/// `f_v` exists once in the store, and both its passes write gradients to
/// that same storage, before and after optimizer steps.
pub fn visible_head_storage_is_shared() {
    let w = world();
    let mut trainer = Trainer::new(&w.train, Some(&w.codebook), &w.config).unwrap();
    for _ in 0..2 {
        let model = &trainer.model;
        let ids = head_ids(&model.visible_head);
        let named: Vec<ParamId> =
            model.store.iter().filter(|(_, p)| p.name.starts_with("visible_head")).map(|(id, _)| id).collect();
        assert_eq!(named, ids, "visible head parameters are stored once");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_tensor(model.roi_channels(), ROI_SIZE, ROI_SIZE, &mut rng);
        let targets = amodal_core::model::RoiTargets {
            amodal: (0..MASK_SIZE * MASK_SIZE).map(|i| (i % 3 == 0) as u8 as f64).collect(),
            visible: (0..MASK_SIZE * MASK_SIZE).map(|i| (i % 6 == 0) as u8 as f64).collect(),
            label: 0,
        };
        let priors = w.codebook.shape_prior_search(&Mask::zeros(MASK_SIZE, MASK_SIZE), 1, 2).unwrap();
        let fwd = model.roi_forward(&f, &w.config.pipeline, &mut |_| Ok(priors.clone())).unwrap();
        let touched = |scale: RoiTerms| -> BTreeSet<usize> {
            let mut g = model.store.zero_grads();
            model.roi_backward(&fwd, &targets, &FeatureMatchConfig::default(), AmodalMaskLoss::Bce, &scale, &mut g);
            g.iter().filter(|(_, v)| v.iter().any(|x| *x != 0.0)).map(|(id, _)| id.index()).collect()
        };
        let coarse = touched(RoiTerms { visible_coarse: 1.0, ..RoiTerms::default() });
        let refined = touched(RoiTerms { visible_refined: 1.0, ..RoiTerms::default() });
        let v: BTreeSet<usize> = ids.iter().map(|id| id.index()).collect();
        assert_eq!(coarse, v, "coarse visible loss reaches exactly f_v");
        assert!(v.is_subset(&refined), "refined visible loss reaches the same f_v storage");
        trainer.step().unwrap();
    }
}

pub fn fused_scores_stay_below_both_factors() {
    let w = world();
    let model = world_model(5);
    let pipeline = PipelineOptions { shape_prior_postprocess: false, ..PipelineOptions::default() };
    let det = Detector::new(&model, &pipeline, Some(&w.codebook), InferenceOptions::default()).unwrap();
    check(4, 0usize..w.train.scenes.len(), |i| {
        let scene = &w.train.scenes[i];
        let boxes: Vec<BoundingBox> = scene.instances.iter().map(|a| a.bbox).collect();
        for c in det.candidates(&scene.image, Some(&boxes)).unwrap() {
            let s = c.detection.class_score;
            let r = c.reclass_prob.expect("reclass runs");
            prop_assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&r));
            prop_assert!(s <= c.class_prob.min(r) + 1e-15);
            prop_assert!((s - c.class_prob * r).abs() < 1e-15);
        }
        Ok(())
    });
    check(256, (0.0..=1.0f64, 0.0..=1.0f64), |(a, b)| {
        prop_assert!(a * b <= a.min(b));
        Ok(())
    });
}

pub fn visible_losses_are_nonnegative_and_unit_attention_matches() {
    let w = world();
    let model = world_model(6);
    check(12, (any::<u64>(), 0u8..4), |(seed, variant)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_tensor(model.roi_channels(), ROI_SIZE, ROI_SIZE, &mut rng);
        let n = MASK_SIZE * MASK_SIZE;
        let amodal: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let visible = amodal.iter().map(|a| a * rng.gen_bool(0.5) as u8 as f64).collect();
        let t = amodal_core::model::RoiTargets { amodal, visible, label: rng.gen_range(0..2) };
        let opts = PipelineOptions { variant: amodal_core::model::AblationVariant::ALL[variant as usize], ..PipelineOptions::default() };
        let priors = w.codebook.shape_prior_search(&Mask::zeros(MASK_SIZE, MASK_SIZE), 1, 2).unwrap();
        let fwd = model.roi_forward(&f, &opts, &mut |_| Ok(priors.clone())).unwrap();
        let terms = model.roi_losses(&fwd, &t, &FeatureMatchConfig::default(), AmodalMaskLoss::Bce);
        for v in [terms.visible_refined, terms.reclass, terms.visible_fm, terms.amodal_refined, terms.amodal_fm] {
            prop_assert!(v >= 0.0);
        }
        let ones = Mask::ones(MASK_SIZE, MASK_SIZE);
        let fm = FeatureMatchConfig { lambdas: [1.0; 5], lambda_rc: 1.0 };
        let vfm = visible_feature_matching(&model, &[(feature(f), ones)], &fm).unwrap();
        prop_assert!(vfm.abs() < 1e-12, "L_vfm with unit attention = {}", vfm);
        Ok(())
    });
}

// ---- shape prior ----

pub fn kmeans_objective_falls_and_centroids_are_means() {
    let strat = (prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 2..20), 1usize..5, any::<u64>());
    check(128, strat, |(pts, k, seed)| {
        let pts: Vec<Vec<f64>> = pts.into_iter().map(|(x, y)| vec![x, y]).collect();
        let k = k.min(pts.len());
        let r = kmeans(&pts, k, KMeansInit::PlusPlus { seed }, MAX_ITERATIONS).unwrap();
        prop_assert!(r.converged);
        prop_assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for (c, centre) in r.centroids.iter().enumerate() {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&r.assignments).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..2 {
                let mean = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                prop_assert!((centre[d] - mean).abs() <= 1e-9);
            }
        }
        Ok(())
    });
}

pub fn search_is_sorted_and_sized() {
    let cb = &world().codebook;
    check(32, (soft_mask(MASK_SIZE, MASK_SIZE), 1usize..=4, 1u32..=2), |(m, k, cat)| {
        let hits = cb.search(&m, cat, k).unwrap();
        prop_assert_eq!(hits.len(), k);
        prop_assert!(hits.windows(2).all(|w| w[0].distance <= w[1].distance));
        prop_assert_eq!(cb.shape_prior_search(&m, cat, k).unwrap().len(), k);
        Ok(())
    });
}

pub fn similarity_is_bounded_and_one_only_on_exact_match() {
    let cb = &world().codebook;
    let priors: Vec<Mask> = cb.search(&Mask::zeros(MASK_SIZE, MASK_SIZE), 1, 4).unwrap().into_iter().map(|p| p.mask).collect();
    let strat = prop_oneof![
        soft_mask(MASK_SIZE, MASK_SIZE),
        binary_mask(MASK_SIZE, MASK_SIZE),
        (0usize..4).prop_map(move |i| priors[i].clone()),
    ];
    check(48, (strat, 1u32..=2), |(m, cat)| {
        let s = cb.shape_similarity(&m, cat).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let nearest = cb.search(&m, cat, 1).unwrap().remove(0).mask;
        prop_assert_eq!(s == 1.0, m == nearest);
        Ok(())
    });
    check(128, (soft_mask(4, 4), soft_mask(4, 4)), |(p, q)| {
        for norm in [SimilarityNorm::L1, SimilarityNorm::L2] {
            let s = mask_similarity(&p, &q, norm);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s == 1.0, p == q);
            prop_assert_eq!(mask_similarity(&p, &p, norm), 1.0);
        }
        Ok(())
    });
}

pub fn search_never_mutates_the_codebook() {
    let cb = &world().codebook;
    let before = cb.storage_hash();
    let snapshot: Vec<Vec<Vec<f64>>> = cb.categories().iter().map(|&c| cb.centroids(c).unwrap().to_vec()).collect();
    check(24, (soft_mask(MASK_SIZE, MASK_SIZE), 1u32..=2), |(m, cat)| {
        cb.search(&m, cat, 3).unwrap();
        cb.shape_similarity(&m, cat).unwrap();
        prop_assert_eq!(cb.storage_hash(), before);
        Ok(())
    });
    let after: Vec<Vec<Vec<f64>>> = cb.categories().iter().map(|&c| cb.centroids(c).unwrap().to_vec()).collect();
    assert_eq!(snapshot, after);
}

pub fn autoencoder_and_codebook_shapes_are_fixed() {
    let cb = &world().codebook;
    let ae = cb.autoencoder();
    check(24, soft_mask(MASK_SIZE, MASK_SIZE), |m| {
        let z = ae.encode(&m).unwrap();
        prop_assert_eq!(z.len(), ae.dim());
        prop_assert_eq!(ae.decode(&z).unwrap().resolution(), m.resolution());
        Ok(())
    });
    for cat in cb.categories() {
        let cs = cb.centroids(cat).unwrap();
        assert_eq!(cs.len(), cb.meta().k_requested);
        assert!(cs.iter().all(|c| c.len() == cb.meta().dim));
    }
}

// ---- amodal module ----

/// Two ROIs that agree on `F·M_v^r` and the priors get bit-identical refined
/// amodal masks, whatever their features hold under the zero attention.
pub fn refined_amodal_depends_only_on_masked_features_and_priors() {
    let w = world();
    let model = world_model(7);
    let c = model.roi_channels();
    check(16, (any::<u64>(), binary_mask(MASK_SIZE, MASK_SIZE)), |(seed, m)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f1 = random_tensor(c, ROI_SIZE, ROI_SIZE, &mut rng);
        let ones = feature(Tensor::from_vec(c, ROI_SIZE, ROI_SIZE, vec![1.0; c * ROI_SIZE * ROI_SIZE]).unwrap());
        let att = apply_mask_attention(&ones, &m).features;
        let mut f2 = f1.clone();
        for (v, a) in f2.data_mut().iter_mut().zip(att.data()) {
            if *a == 0.0 {
                *v = rng.gen_range(-5.0..5.0);
            }
        }
        let (f1, f2) = (feature(f1), feature(f2));
        let (a1, a2) = (apply_mask_attention(&f1, &m), apply_mask_attention(&f2, &m));
        prop_assert_eq!(a1.features.data(), a2.features.data());
        let priors = w.codebook.shape_prior_search(&m, 1 + (seed % 2) as u32, 2).unwrap();
        prop_assert_eq!(refine_amodal(&model, &f1, &m, &priors).unwrap(), refine_amodal(&model, &f2, &m, &priors).unwrap());
        Ok(())
    });
}

pub fn refined_amodal_loss_is_minimised_at_the_target() {
    check(64, (binary_mask(6, 6), prop::collection::vec(-8.0..8.0f64, 36)), |(t, logits)| {
        let random = refined_amodal_loss(&[Tensor::from_vec(1, 6, 6, logits).unwrap()], &[t.clone()]);
        let sharp: Vec<f64> = t.data().iter().map(|&v| if v > 0.5 { 30.0 } else { -30.0 }).collect();
        let best = refined_amodal_loss(&[Tensor::from_vec(1, 6, 6, sharp).unwrap()], &[t]);
        prop_assert!(random >= 0.0 && best >= 0.0);
        prop_assert!(best < 1e-12 && best <= random);
        Ok(())
    });
}

pub fn every_prior_channel_reaches_the_output() {
    let w = world();
    check(8, any::<u64>(), |seed| {
        let model = world_model(seed);
        prop_assert_eq!(model.amodal_head.in_channels, model.roi_channels() + model.prior_count());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = feature(random_tensor(model.roi_channels(), ROI_SIZE, ROI_SIZE, &mut rng));
        let m = Mask::from_fn(MASK_SIZE, MASK_SIZE, |_, _| rng.gen_bool(0.7) as u8 as f64);
        let priors = w.codebook.shape_prior_search(&m, 1, 2).unwrap();
        prop_assert_eq!(model.prior_tensor(&priors).unwrap().shape(), [2, ROI_SIZE, ROI_SIZE]);
        let base = refine_amodal(&model, &f, &m, &priors).unwrap();
        for i in 0..priors.len() {
            let mut altered = priors.clone();
            altered[i] = altered[i].complement();
            prop_assert_ne!(&refine_amodal(&model, &f, &m, &altered).unwrap(), &base);
        }
        Ok(())
    });
    assert_eq!(ModelConfig::default().prior_count, 16);
}

// ---- training ----

pub fn total_is_the_sum_of_reported_terms() {
    check(256, (prop::array::uniform9(0.0..10.0f64), prop::array::uniform9(any::<bool>())), |(v, on)| {
        let report = LossReport::from_array(v);
        prop_assert_eq!(report.total(), v.iter().sum::<f64>());
        prop_assert_eq!(report.get("total"), Some(report.total()));
        let toggles = LossToggles {
            cls: on[0],
            reg: on[1],
            amodal_coarse: on[2],
            visible_coarse: on[3],
            amodal_refined: on[4],
            visible_refined: on[5],
            reclass: on[6],
            amodal_fm: on[7],
            visible_fm: on[8],
        };
        prop_assert_eq!(toggles.as_array(), on);
        let kept = total_loss(&report, &toggles);
        for ((x, orig), o) in kept.as_array().iter().zip(v).zip(on) {
            prop_assert_eq!(*x, if o { orig } else { 0.0 });
        }
        Ok(())
    });
    assert_eq!(TERM_NAMES.len(), LossToggles::all(true).as_array().len());
}

pub fn instance_weights_ramp_monotonically() {
    let strat = (binary_mask(6, 6), binary_mask(6, 6), binary_mask(6, 6), 0usize..600, 0usize..600, 0usize..300);
    check(128, strat, |(ca, cv, g, i1, i2, warm)| {
        let (lo, hi) = (i1.min(i2), i1.max(i2));
        let a = compute_instance_weights(lo, warm, &ca, &cv, &g, &g).unwrap();
        let b = compute_instance_weights(hi, warm, &ca, &cv, &g, &g).unwrap();
        for x in [a.amodal_weight, a.visible_weight, b.amodal_weight, b.visible_weight] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!(a.amodal_weight <= b.amodal_weight && a.visible_weight <= b.visible_weight);
        if hi >= warm {
            prop_assert_eq!(warmup_ramp(hi, warm), 1.0);
            let full = compute_instance_weights(hi, warm, &g, &g, &g, &g).unwrap();
            prop_assert_eq!((full.amodal_weight, full.visible_weight), (1.0, 1.0));
        }
        Ok(())
    });
}

fn gradients_with(terms: LossToggles, seed: u64) -> (ParamStore, amodal_core::nn::Gradients) {
    let w = world();
    let cfg = TrainConfig { terms, seed, ..w.config.clone() };
    let mut trainer = Trainer::new(&w.train, Some(&w.codebook), &cfg).unwrap();
    let batch = trainer.next_batch();
    let (_, g) = trainer.batch_gradients(&batch).unwrap();
    (trainer.model.store.clone(), g)
}

fn grads_named(store: &ParamStore, g: &amodal_core::nn::Gradients, prefix: &str) -> Vec<f64> {
    store.iter().filter(|(_, p)| p.name.starts_with(prefix)).flat_map(|(id, _)| g.get(id).to_vec()).collect()
}

/// Parameters used by one term alone get exactly zero gradient when that
/// term is off.
pub fn disabled_terms_leave_their_parameters_untouched() {
    check(4, any::<u64>(), |seed| {
        let (store, g) = gradients_with(LossToggles { reclass: false, ..LossToggles::all(true) }, seed);
        prop_assert!(grads_named(&store, &g, "reclass").iter().all(|&x| x == 0.0));
        let (store, g) = gradients_with(LossToggles { cls: false, reg: false, ..LossToggles::all(true) }, seed);
        prop_assert!(grads_named(&store, &g, "box_head").iter().all(|&x| x == 0.0));
        let (store, g) = gradients_with(LossToggles { reg: false, ..LossToggles::all(true) }, seed);
        prop_assert!(grads_named(&store, &g, "box_head.reg").iter().all(|&x| x == 0.0));
        let (_, g) = gradients_with(LossToggles::all(false), seed);
        prop_assert_eq!(g.norm(), 0.0);
        Ok(())
    });
}

pub fn training_is_deterministic_under_seed() {
    let w = world();
    let run = |cfg: &TrainConfig| -> Vec<Vec<f64>> {
        let mut t = Trainer::new(&w.train, Some(&w.codebook), cfg).unwrap();
        for _ in 0..cfg.iterations {
            t.step().unwrap();
        }
        t.model.store.params().iter().map(|p| p.data.clone()).collect()
    };
    let init = |cfg: &TrainConfig| -> Vec<Vec<f64>> {
        AmodalModel::new(&cfg.model, cfg.seed).unwrap().store.params().iter().map(|p| p.data.clone()).collect()
    };
    check(2, 0u64..1000, |seed| {
        let cfg = TrainConfig { seed, ..w.config.clone() };
        let a = run(&cfg);
        prop_assert_eq!(&a, &run(&cfg));
        prop_assert_ne!(&a, &init(&cfg));
        let frozen = TrainConfig { learning_rate: 0.0, weight_decay: 0.0, ..cfg.clone() };
        prop_assert_eq!(run(&frozen), init(&frozen));
        Ok(())
    });
}

pub fn train_config_rejects_bad_rates() {
    check(64, (-1.0..1.0f64, 0usize..4), |(rate, which)| {
        let mut cfg = TrainConfig::default();
        match which {
            0 => cfg.learning_rate = rate,
            1 => cfg.momentum = rate,
            2 => cfg.weight_decay = rate,
            _ => cfg.box_jitter = rate,
        }
        prop_assert_eq!(cfg.validate().is_ok(), rate >= 0.0);
        Ok(())
    });
}

// ---- inference and evaluation ----

pub fn rescoring_never_raises_and_keeps_order() {
    check(512, (0.0..=1.0f64, 0.0..=1.0f64, -0.5..1.5f64), |(a, b, sim)| {
        prop_assert!(rescore(a, sim) <= a);
        if a < b {
            prop_assert!(rescore(a, sim) <= rescore(b, sim));
            if sim > 0.0 {
                prop_assert!(rescore(a, sim) < rescore(b, sim));
            }
        }
        prop_assert_eq!(rescore(a, 1.0), a);
        Ok(())
    });
}

pub fn nms_keeps_a_separated_subset() {
    let strat = (
        prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 1.0..20.0f64, 1.0..20.0f64, 0.0..1.0f64), 0..12),
        0.1..0.9f64,
    );
    check(256, strat, |(raw, thr)| {
        let boxes: Vec<BoundingBox> = raw.iter().map(|&(x, y, w, h, _)| BoundingBox::new(x, y, x + w, y + h).unwrap()).collect();
        let scores: Vec<f64> = raw.iter().map(|r| r.4).collect();
        let keep = nms_indices(&boxes, &scores, thr);
        let set: BTreeSet<usize> = keep.iter().copied().collect();
        prop_assert_eq!(set.len(), keep.len());
        prop_assert!(keep.iter().all(|&i| i < boxes.len()));
        for (n, &i) in keep.iter().enumerate() {
            for &j in &keep[n + 1..] {
                prop_assert!(boxes[i].iou(&boxes[j]) <= thr);
                prop_assert!(scores[i] >= scores[j]);
            }
        }
        Ok(())
    });
}

fn scene_case() -> impl Strategy<Value = (Vec<(usize, usize, usize, usize)>, Vec<(usize, usize, usize, usize)>)> {
    let r = (0usize..12, 0usize..12, 2usize..8, 2usize..8);
    (prop::collection::vec(r.clone(), 1..5), prop::collection::vec(r, 0..7))
}

fn to_masks(v: &[(usize, usize, usize, usize)]) -> Vec<Mask> {
    v.iter().map(|&(x, y, w, h)| rect(20, 20, x, y, w, h)).collect()
}

pub fn evaluate_ignores_detection_order() {
    check(96, (scene_case(), any::<u64>()), |((g, d), seed)| {
        let gts: Vec<_> = to_masks(&g).iter().map(gt_of).collect();
        let mut dets: Vec<_> =
            to_masks(&d).iter().enumerate().map(|(i, m)| det_of(m, 0.9 - 0.1 * i as f64)).collect();
        let cfg = EvalConfig::default();
        let base = evaluate(&[dets.clone()], &[gts.clone()], &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..dets.len()).rev() {
            dets.swap(i, rng.gen_range(0..=i));
        }
        prop_assert_eq!(evaluate(&[dets], &[gts], &cfg).unwrap(), base);
        Ok(())
    });
}

pub fn a_correct_top_detection_never_lowers_ap() {
    check(128, scene_case(), |(g, d)| {
        let gm = to_masks(&g);
        let dm = to_masks(&d);
        // a GT no detection could ever match, at any threshold
        let free = gm.iter().position(|gt| dm.iter().all(|m| mask_iou(m, gt).unwrap() < 0.5));
        prop_assume!(free.is_some());
        let gts: Vec<_> = gm.iter().map(gt_of).collect();
        let mut dets: Vec<_> = dm.iter().enumerate().map(|(i, m)| det_of(m, 0.8 - 0.1 * i as f64)).collect();
        let cfg = EvalConfig::default();
        let before = evaluate(&[dets.clone()], &[gts.clone()], &cfg).unwrap();
        dets.push(det_of(&gm[free.unwrap()], 0.95));
        let after = evaluate(&[dets], &[gts], &cfg).unwrap();
        prop_assert!(after.amodal.ap >= before.amodal.ap - 1e-12);
        prop_assert!(after.amodal.ar >= before.amodal.ar - 1e-12);
        Ok(())
    });
}

pub fn eval_config_defaults_are_in_range() {
    let cfg = EvalConfig::default();
    assert!(cfg.iou_thresholds.iter().all(|&t| t > 0.0 && t < 1.0));
    assert_eq!(cfg.occlusion_cutoff, 0.15);
    cfg.validate().unwrap();
    check(64, 0.0..1.5f64, |t| {
        let c = EvalConfig { iou_thresholds: vec![t], ..EvalConfig::default() };
        prop_assert_eq!(c.validate().is_ok(), t > 0.0 && t < 1.0);
        Ok(())
    });
}

/// Every invariant, by name.
pub const ALL: &[(&str, fn())] = &[
    ("mask_iou_is_symmetric_bounded_and_exact", mask_iou_is_symmetric_bounded_and_exact),
    ("resize_stays_in_unit_range", resize_stays_in_unit_range),
    ("clipped_boxes_are_ordered_and_inside", clipped_boxes_are_ordered_and_inside),
    ("annotations_are_consistent", annotations_are_consistent),
    ("roi_features_have_the_configured_resolution", roi_features_have_the_configured_resolution),
    ("scenes_are_layered_by_depth", scenes_are_layered_by_depth),
    ("scene_generation_is_deterministic", scene_generation_is_deterministic),
    ("silhouettes_are_connected_and_dense", silhouettes_are_connected_and_dense),
    ("coarse_masks_are_probabilities_at_twice_roi_size", coarse_masks_are_probabilities_at_twice_roi_size),
    ("independently_initialized_heads_differ", independently_initialized_heads_differ),
    ("visible_head_storage_is_shared", visible_head_storage_is_shared),
    ("fused_scores_stay_below_both_factors", fused_scores_stay_below_both_factors),
    ("visible_losses_are_nonnegative_and_unit_attention_matches", visible_losses_are_nonnegative_and_unit_attention_matches),
    ("kmeans_objective_falls_and_centroids_are_means", kmeans_objective_falls_and_centroids_are_means),
    ("search_is_sorted_and_sized", search_is_sorted_and_sized),
    ("similarity_is_bounded_and_one_only_on_exact_match", similarity_is_bounded_and_one_only_on_exact_match),
    ("search_never_mutates_the_codebook", search_never_mutates_the_codebook),
    ("autoencoder_and_codebook_shapes_are_fixed", autoencoder_and_codebook_shapes_are_fixed),
    ("refined_amodal_depends_only_on_masked_features_and_priors", refined_amodal_depends_only_on_masked_features_and_priors),
    ("refined_amodal_loss_is_minimised_at_the_target", refined_amodal_loss_is_minimised_at_the_target),
    ("every_prior_channel_reaches_the_output", every_prior_channel_reaches_the_output),
    ("total_is_the_sum_of_reported_terms", total_is_the_sum_of_reported_terms),
    ("instance_weights_ramp_monotonically", instance_weights_ramp_monotonically),
    ("disabled_terms_leave_their_parameters_untouched", disabled_terms_leave_their_parameters_untouched),
    ("training_is_deterministic_under_seed", training_is_deterministic_under_seed),
    ("train_config_rejects_bad_rates", train_config_rejects_bad_rates),
    ("rescoring_never_raises_and_keeps_order", rescoring_never_raises_and_keeps_order),
    ("nms_keeps_a_separated_subset", nms_keeps_a_separated_subset),
    ("evaluate_ignores_detection_order", evaluate_ignores_detection_order),
    ("a_correct_top_detection_never_lowers_ap", a_correct_top_detection_never_lowers_ap),
    ("eval_config_defaults_are_in_range", eval_config_defaults_are_in_range),
];
