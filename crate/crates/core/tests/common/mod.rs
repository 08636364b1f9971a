#![allow(dead_code)]

use amodal_core::mask::Mask;
use amodal_core::model::{
    AmodalMaskLoss, AmodalModel, BackboneConfig, FeatureMatchConfig, ModelConfig, PipelineOptions, RoiTargets,
    RoiTerms,
};
use amodal_core::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small model whose every parameter can be finite-differenced quickly.
pub fn toy_model(seed: u64) -> AmodalModel {
    let config = ModelConfig {
        backbone: BackboneConfig { stage_widths: vec![3, 3, 3], roi_channels: 8, roi_size: 6, use_gt_boxes: true },
        num_categories: 2,
        mask_head_width: 4,
        prior_count: 2,
        box_head_hidden: 6,
        reclass_hidden: 6,
    };
    let mut model = AmodalModel::new(&config, seed).unwrap();
    // nonzero biases keep ReLU pre-activations away from the kink at zero
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        if model.store.param(id).name.ends_with(".bias") {
            model.store.get_mut(id).iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
    }
    model
}

pub fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn random_binary(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

pub fn toy_priors(model: &AmodalModel, seed: u64) -> Vec<Mask> {
    let m = 2 * model.roi_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..model.prior_count()).map(|_| Mask::from_fn(m, m, |_, _| rng.gen_range(0.0..1.0))).collect()
}

pub fn toy_targets(model: &AmodalModel, seed: u64) -> RoiTargets {
    let n = (2 * model.roi_size()).pow(2);
    let amodal = random_binary(n, seed);
    let visible = amodal.iter().zip(random_binary(n, seed + 1)).map(|(a, b)| a * b).collect();
    RoiTargets { amodal, visible, label: 1 }
}

/// Weighted sum of the per-ROI terms under `scale`.
pub fn weighted(terms: &RoiTerms, scale: &RoiTerms) -> f64 {
    terms.amodal_coarse * scale.amodal_coarse
        + terms.visible_coarse * scale.visible_coarse
        + terms.amodal_refined * scale.amodal_refined
        + terms.visible_refined * scale.visible_refined
        + terms.reclass * scale.reclass
        + terms.amodal_fm * scale.amodal_fm
        + terms.visible_fm * scale.visible_fm
}

pub struct GraphCase {
    pub model: AmodalModel,
    pub feature: Tensor,
    pub priors: Vec<Mask>,
    pub targets: RoiTargets,
    pub opts: PipelineOptions,
    pub fm: FeatureMatchConfig,
}

impl GraphCase {
    pub fn new(seed: u64, opts: PipelineOptions) -> Self {
        let model = toy_model(seed);
        let (c, r) = (model.roi_channels(), model.roi_size());
        let feature = random_tensor(c, r, r, seed + 10);
        let priors = toy_priors(&model, seed + 20);
        let targets = toy_targets(&model, seed + 30);
        // large λ so matching gradients are not swamped by rounding
        let fm = FeatureMatchConfig { lambdas: [0.3, 0.2, 0.1, 0.5, 0.7], lambda_rc: 0.25 };
        Self { model, feature, priors, targets, opts, fm }
    }

    pub fn loss(&self, model: &AmodalModel, feature: &Tensor, scale: &RoiTerms) -> f64 {
        self.eval(model, feature, scale).0
    }

    fn eval(&self, model: &AmodalModel, feature: &Tensor, scale: &RoiTerms) -> (f64, Vec<bool>) {
        let priors = self.priors.clone();
        let fwd = model.roi_forward(feature, &self.opts, &mut |_| Ok(priors.clone())).unwrap();
        let loss = weighted(&model.roi_losses(&fwd, &self.targets, &self.fm, AmodalMaskLoss::Bce), scale);
        (loss, fwd.relu_pattern())
    }

    /// Analytic gradient over all parameters then all feature entries.
    pub fn analytic(&self, scale: &RoiTerms) -> Vec<f64> {
        let priors = self.priors.clone();
        let fwd = self.model.roi_forward(&self.feature, &self.opts, &mut |_| Ok(priors.clone())).unwrap();
        let mut grads = self.model.store.zero_grads();
        let df = self.model.roi_backward(&fwd, &self.targets, &self.fm, AmodalMaskLoss::Bce, scale, &mut grads);
        let mut analytic: Vec<f64> = grads.iter().flat_map(|(_, g)| g.to_vec()).collect();
        analytic.extend_from_slice(df.data());
        analytic
    }

    /// Returns (analytic, numeric) gradients; see [`central_difference`].
    pub fn gradients(&self, scale: &RoiTerms, step: f64) -> FdResult {
        let analytic = self.analytic(scale);
        let base = self.eval(&self.model, &self.feature, scale).1;
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut fallbacks = 0;
        let mut model = self.model.clone();
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for i in 0..model.store.get(id).len() {
                let orig = model.store.get(id)[i];
                let (g, fell_back) = central_difference(step, &base, |x| {
                    model.store.get_mut(id)[i] = orig + x;
                    let r = self.eval(&model, &self.feature, scale);
                    model.store.get_mut(id)[i] = orig;
                    r
                });
                fallbacks += fell_back as usize;
                numeric.push(g);
            }
        }
        let mut f = self.feature.clone();
        for i in 0..f.len() {
            let orig = f.data()[i];
            let (g, fell_back) = central_difference(step, &base, |x| {
                f.data_mut()[i] = orig + x;
                let r = self.eval(&self.model, &f, scale);
                f.data_mut()[i] = orig;
                r
            });
            fallbacks += fell_back as usize;
            numeric.push(g);
        }
        FdResult { analytic, numeric, fallbacks }
    }
}

pub struct FdResult {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Components re-probed at the fine step because a ReLU changed state.
    pub fallbacks: usize,
}

/// Fine step used when the coarse probe straddles a ReLU kink.
pub const KINK_STEP: f64 = 1e-6;

/// Central difference of `f` at `step`. Central differences are invalid
/// across a ReLU kink, so when either probe changes the activation pattern
/// the component is re-probed at [`KINK_STEP`].
pub fn central_difference(step: f64, base: &[bool], mut f: impl FnMut(f64) -> (f64, Vec<bool>)) -> (f64, bool) {
    let (plus, pp) = f(step);
    let (minus, pm) = f(-step);
    if pp == base && pm == base {
        return ((plus - minus) / (2.0 * step), false);
    }
    let (plus, _) = f(KINK_STEP);
    let (minus, _) = f(-KINK_STEP);
    ((plus - minus) / (2.0 * KINK_STEP), true)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn only(f: impl Fn(&mut RoiTerms)) -> RoiTerms {
    let mut t = RoiTerms::default();
    f(&mut t);
    t
}
