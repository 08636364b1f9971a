//! Per-ROI differentiable graph: coarse heads, mask-attention refinement,
//! reclassification and feature matching, with a hand-written backward.
//!
//! Every pass of `f_v` and `f_a` goes through the single head object held by
//! [`AmodalModel`], so the coarse and refined passes share storage.

use serde::{Deserialize, Serialize};

use super::heads::{HeadGrad, HeadTrace, ReclassTrace, MASK_HEAD_LAYERS};
use super::network::AmodalModel;
use crate::error::{Error, Result};
use crate::mask::{BilinearResize, Mask};
use crate::nn::loss::{bce_with_logits, cosine_loss, softmax_cross_entropy};
use crate::nn::{sigmoid, Gradients, Tensor};

/// Which masks attend which heads in the refinement stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    /// `M_a^r = f_a(F·M_a^c)`, `M_v^r = f_v(F·M_v^c)`.
    BothSelf,
    /// `M_v^r = f_v(F·M_v^c)`, `M_a^r = f_a(F·M_v^r)`.
    OnlyVisible,
    /// `M_a^r = f_a(F·M_v^c)`, `M_v^r = f_v(F·M_a^c)`.
    Cross,
    /// `M_v^r = f_v(F·M_a^c)`, `M_a^r = f_a(F·M_v^r)`; priors appended.
    #[default]
    Ours,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] =
        [AblationVariant::BothSelf, AblationVariant::OnlyVisible, AblationVariant::Cross, AblationVariant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::BothSelf => "both-self",
            AblationVariant::OnlyVisible => "only-visible",
            AblationVariant::Cross => "cross",
            AblationVariant::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Wiring of the refinement stage; stored in checkpoints so inference runs
/// the same graph the model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub variant: AblationVariant,
    /// `false` yields a coarse-only model.
    pub refinement: bool,
    /// Amodal refinement attends to a mask; off means it sees raw `F`.
    pub visible_attention: bool,
    /// Append retrieved priors to the amodal head input (only in `Ours`).
    pub shape_prior_refinement: bool,
    /// Multiply final scores by shape similarity at inference.
    pub shape_prior_postprocess: bool,
    pub reclass: bool,
    /// Run the extra `f_a` pass needed by amodal feature matching.
    pub feature_matching: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            variant: AblationVariant::Ours,
            refinement: true,
            visible_attention: true,
            shape_prior_refinement: true,
            shape_prior_postprocess: true,
            reclass: true,
            feature_matching: true,
        }
    }
}

impl PipelineOptions {
    pub fn coarse_only() -> Self {
        Self {
            refinement: false,
            visible_attention: false,
            shape_prior_refinement: false,
            shape_prior_postprocess: false,
            reclass: false,
            feature_matching: false,
            ..Self::default()
        }
    }

    pub fn uses_priors(&self) -> bool {
        self.refinement && self.shape_prior_refinement && self.variant == AblationVariant::Ours
    }

    pub fn uses_reclass(&self) -> bool {
        self.refinement && self.reclass
    }
}

/// Layer weights `λ_j` for feature matching and the reclassification weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureMatchConfig {
    pub lambdas: [f64; MASK_HEAD_LAYERS],
    pub lambda_rc: f64,
}

impl Default for FeatureMatchConfig {
    fn default() -> Self {
        Self { lambdas: [0.0, 0.0, 0.0, 0.01, 0.05], lambda_rc: 0.25 }
    }
}

impl FeatureMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().chain([&self.lambda_rc]).any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("feature-matching weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-pixel loss on the refined amodal mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmodalMaskLoss {
    #[default]
    Bce,
    /// Softmax cross-entropy over (background, foreground) with logits `(0, z)`.
    TwoClassCe,
}

fn amodal_mask_loss(kind: AmodalMaskLoss, logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    match kind {
        AmodalMaskLoss::Bce => bce_with_logits(logits, targets),
        AmodalMaskLoss::TwoClassCe => {
            let n = logits.len() as f64;
            let mut loss = 0.0;
            let grad = logits
                .iter()
                .zip(targets)
                .map(|(&z, &y)| {
                    let (l, g) = softmax_cross_entropy(&[0.0, z], (y >= 0.5) as usize);
                    loss += l;
                    g[1] / n
                })
                .collect();
            (loss / n, grad)
        }
    }
}

/// Attention map: the logistic of a head's logits resampled to ROI size.
pub(crate) fn attention_from_logits(logits: &Tensor, roi_size: usize) -> Vec<f64> {
    let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    resample(&probs, (logits.height(), logits.width()), roi_size)
}

pub(crate) fn resample(values: &[f64], src: (usize, usize), roi_size: usize) -> Vec<f64> {
    if src == (roi_size, roi_size) {
        return values.to_vec();
    }
    let mut out = vec![0.0; roi_size * roi_size];
    BilinearResize::new(src, (roi_size, roi_size)).forward(values, &mut out);
    out
}

/// `F·m`: every channel of `f` times the spatial map `att`.
pub(crate) fn masked(f: &Tensor, att: &[f64]) -> Tensor {
    let mut out = f.clone();
    for c in 0..f.channels() {
        out.channel_mut(c).iter_mut().zip(att).for_each(|(v, a)| *v *= a);
    }
    out
}

/// Backward of [`masked`]: adds `d ⊙ att` to `df`, returns `Σ_c d ⊙ F`.
fn masked_backward(f: &Tensor, att: &[f64], d: &Tensor, df: &mut Tensor) -> Vec<f64> {
    let mut d_att = vec![0.0; att.len()];
    for c in 0..f.channels() {
        let (fc, dc) = (f.channel(c), d.channel(c));
        let dfc = df.channel_mut(c);
        for i in 0..att.len() {
            dfc[i] += dc[i] * att[i];
            d_att[i] += dc[i] * fc[i];
        }
    }
    d_att
}

/// Backward of [`attention_from_logits`] into the source logits.
fn attention_backward(src: &HeadTrace, d_att: &[f64], roi_size: usize, d_logits: &mut Tensor) {
    let (h, w) = (src.logits.height(), src.logits.width());
    let mut d_probs = vec![0.0; h * w];
    if (h, w) == (roi_size, roi_size) {
        d_probs.copy_from_slice(d_att);
    } else {
        BilinearResize::new((h, w), (roi_size, roi_size)).backward(d_att, &mut d_probs);
    }
    for ((g, &z), dp) in d_logits.data_mut().iter_mut().zip(src.logits.data()).zip(d_probs) {
        let p = sigmoid(z);
        *g += dp * p * (1.0 - p);
    }
}

/// Which pass produced an attention mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    CoarseAmodal,
    CoarseVisible,
    RefinedVisible,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub source: MaskSource,
    pub map: Vec<f64>,
}

/// Refinement-stage traces.
#[derive(Debug, Clone)]
pub struct RefinedPasses {
    pub visible_attention: Attention,
    pub refined_visible: HeadTrace,
    /// `None` when visible attention is disabled and `f_a` sees raw `F`.
    pub amodal_attention: Option<Attention>,
    /// `k × R × R`; zeros when priors are not used.
    pub priors: Tensor,
    pub refined_amodal: HeadTrace,
    /// `f_a` on the attended feature with empty prior slots.
    pub matching_amodal: Option<HeadTrace>,
    pub reclass: Option<(Vec<f64>, ReclassTrace)>,
}

/// All traces of one ROI's forward pass.
#[derive(Debug, Clone)]
pub struct RoiForward {
    pub feature: Tensor,
    pub coarse_amodal: HeadTrace,
    pub coarse_visible: HeadTrace,
    pub refined: Option<RefinedPasses>,
}

impl RoiForward {
    /// Final amodal mask: refined when available, otherwise coarse.
    pub fn amodal_mask(&self) -> Mask {
        self.refined.as_ref().map_or(&self.coarse_amodal, |r| &r.refined_amodal).mask()
    }

    pub fn visible_mask(&self) -> Mask {
        self.refined.as_ref().map_or(&self.coarse_visible, |r| &r.refined_visible).mask()
    }

    /// ReLU activity of every pass, in a fixed order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = self.coarse_amodal.relu_pattern();
        out.extend(self.coarse_visible.relu_pattern());
        if let Some(r) = &self.refined {
            out.extend(r.refined_visible.relu_pattern());
            out.extend(r.refined_amodal.relu_pattern());
            if let Some(m) = &r.matching_amodal {
                out.extend(m.relu_pattern());
            }
            if let Some((_, rc)) = &r.reclass {
                out.extend(rc.relu_pattern());
            }
        }
        out
    }

    pub fn reclass_logits(&self) -> Option<&[f64]> {
        self.refined.as_ref().and_then(|r| r.reclass.as_ref()).map(|(_, t)| t.logits.as_slice())
    }
}

/// Mask-resolution ground truth for one ROI.
#[derive(Debug, Clone)]
pub struct RoiTargets {
    pub amodal: Vec<f64>,
    pub visible: Vec<f64>,
    /// 0-based category index.
    pub label: usize,
}

/// One value per refinement-related loss term for a single ROI.
///
/// Returned by [`AmodalModel::roi_losses`] as raw (unweighted) values and
/// passed to [`AmodalModel::roi_backward`] as per-term multipliers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoiTerms {
    pub amodal_coarse: f64,
    pub visible_coarse: f64,
    pub amodal_refined: f64,
    pub visible_refined: f64,
    /// Includes `λ_rc`.
    pub reclass: f64,
    /// `(1/S) Σ_j λ_j L_S`.
    pub amodal_fm: f64,
    pub visible_fm: f64,
}

/// Feature-matching value for one pair of passes: `(1/S) Σ_j λ_j (1 − cos)`.
pub fn matching_value(a: &HeadTrace, b: &HeadTrace, fm: &FeatureMatchConfig) -> f64 {
    let mut total = 0.0;
    for (j, &l) in (1..=MASK_HEAD_LAYERS).zip(&fm.lambdas) {
        if l > 0.0 {
            total += l * cosine_loss(a.activation(j).data(), b.activation(j).data()).0;
        }
    }
    total / MASK_HEAD_LAYERS as f64
}

fn matching_backward(a: &HeadTrace, b: &HeadTrace, fm: &FeatureMatchConfig, scale: f64, ga: &mut HeadGrad, gb: &mut HeadGrad) {
    for (j, &l) in (1..=MASK_HEAD_LAYERS).zip(&fm.lambdas) {
        if l == 0.0 {
            continue;
        }
        let act = a.activation(j);
        let (_, da, db) = cosine_loss(act.data(), b.activation(j).data());
        let s = scale * l / MASK_HEAD_LAYERS as f64;
        let [c, h, w] = act.shape();
        let to_tensor = |v: Vec<f64>| Tensor::from_vec(c, h, w, v.into_iter().map(|x| x * s).collect()).expect("activation shape");
        ga.add_activation(j, &to_tensor(da));
        gb.add_activation(j, &to_tensor(db));
    }
}

impl AmodalModel {
    /// Stacks `k` prior masks, resized to ROI size, as channels.
    pub fn prior_tensor(&self, priors: &[Mask]) -> Result<Tensor> {
        let k = self.prior_count();
        if priors.len() != k {
            return Err(Error::Shape(format!("expected {k} shape priors, got {}", priors.len())));
        }
        let r = self.roi_size();
        let mut t = Tensor::zeros(k, r, r);
        for (i, p) in priors.iter().enumerate() {
            t.channel_mut(i).copy_from_slice(&resample(p.data(), p.resolution(), r));
        }
        Ok(t)
    }

    fn check_feature(&self, f: &Tensor) -> Result<()> {
        let (c, r) = (self.roi_channels(), self.roi_size());
        if f.shape() != [c, r, r] {
            return Err(Error::Shape(format!("ROI feature {:?}, expected [{c}, {r}, {r}]", f.shape())));
        }
        Ok(())
    }

    /// Runs every pass `opts` enables. `priors` is called with the coarse
    /// amodal mask only when priors are in use and must return `k` masks.
    pub fn roi_forward(
        &self,
        f: &Tensor,
        opts: &PipelineOptions,
        priors: &mut dyn FnMut(&Mask) -> Result<Vec<Mask>>,
    ) -> Result<RoiForward> {
        self.check_feature(f)?;
        let (k, r) = (self.prior_count(), self.roi_size());
        let store = &self.store;
        let coarse_amodal = self.amodal_head.forward(store, &f.zero_pad_channels(k));
        let coarse_visible = self.visible_head.forward(store, f);
        if !opts.refinement {
            return Ok(RoiForward { feature: f.clone(), coarse_amodal, coarse_visible, refined: None });
        }

        let source_trace = |s: MaskSource, rv: Option<&HeadTrace>| -> Tensor {
            match s {
                MaskSource::CoarseAmodal => coarse_amodal.logits.clone(),
                MaskSource::CoarseVisible => coarse_visible.logits.clone(),
                MaskSource::RefinedVisible => rv.expect("refined visible pass").logits.clone(),
            }
        };

        let v_source = match opts.variant {
            AblationVariant::Ours | AblationVariant::Cross => MaskSource::CoarseAmodal,
            AblationVariant::BothSelf | AblationVariant::OnlyVisible => MaskSource::CoarseVisible,
        };
        let v_map = attention_from_logits(&source_trace(v_source, None), r);
        let refined_visible = self.visible_head.forward(store, &masked(f, &v_map));

        let amodal_attention = opts.visible_attention.then(|| {
            let source = match opts.variant {
                AblationVariant::Ours | AblationVariant::OnlyVisible => MaskSource::RefinedVisible,
                AblationVariant::Cross => MaskSource::CoarseVisible,
                AblationVariant::BothSelf => MaskSource::CoarseAmodal,
            };
            Attention { source, map: attention_from_logits(&source_trace(source, Some(&refined_visible)), r) }
        });
        let fa_masked = match &amodal_attention {
            Some(a) => masked(f, &a.map),
            None => f.clone(),
        };
        let prior_t =
            if opts.uses_priors() { self.prior_tensor(&priors(&coarse_amodal.mask())?)? } else { Tensor::zeros(k, r, r) };
        let refined_amodal = self.amodal_head.forward(store, &fa_masked.concat_channels(&prior_t)?);
        let matching_amodal =
            opts.feature_matching.then(|| self.amodal_head.forward(store, &fa_masked.zero_pad_channels(k)));

        let reclass = opts.reclass.then(|| {
            let map = attention_from_logits(&refined_visible.logits, r);
            let trace = self.reclass_head.forward(store, &masked(f, &map));
            (map, trace)
        });

        Ok(RoiForward {
            feature: f.clone(),
            coarse_amodal,
            coarse_visible,
            refined: Some(RefinedPasses {
                visible_attention: Attention { source: v_source, map: v_map },
                refined_visible,
                amodal_attention,
                priors: prior_t,
                refined_amodal,
                matching_amodal,
                reclass,
            }),
        })
    }

    /// Raw per-ROI loss values; terms whose passes did not run are 0.
    pub fn roi_losses(
        &self,
        fwd: &RoiForward,
        t: &RoiTargets,
        fm: &FeatureMatchConfig,
        amodal_loss: AmodalMaskLoss,
    ) -> RoiTerms {
        let mut out = RoiTerms {
            amodal_coarse: bce_with_logits(fwd.coarse_amodal.logits.data(), &t.amodal).0,
            visible_coarse: bce_with_logits(fwd.coarse_visible.logits.data(), &t.visible).0,
            ..RoiTerms::default()
        };
        if let Some(r) = &fwd.refined {
            out.visible_refined = bce_with_logits(r.refined_visible.logits.data(), &t.visible).0;
            out.amodal_refined = amodal_mask_loss(amodal_loss, r.refined_amodal.logits.data(), &t.amodal).0;
            out.visible_fm = matching_value(&fwd.coarse_visible, &r.refined_visible, fm);
            if let Some(m) = &r.matching_amodal {
                out.amodal_fm = matching_value(&fwd.coarse_amodal, m, fm);
            }
            if let Some((_, rc)) = &r.reclass {
                out.reclass = fm.lambda_rc * softmax_cross_entropy(&rc.logits, t.label).0;
            }
        }
        out
    }

    /// Accumulates into `grads` the gradient of `Σ_term scale · value` and
    /// returns the gradient w.r.t. the ROI feature.
    pub fn roi_backward(
        &self,
        fwd: &RoiForward,
        t: &RoiTargets,
        fm: &FeatureMatchConfig,
        amodal_loss: AmodalMaskLoss,
        scale: &RoiTerms,
        grads: &mut Gradients,
    ) -> Tensor {
        let store = &self.store;
        let (c, r) = (self.roi_channels(), self.roi_size());
        let f = &fwd.feature;
        let mut df = Tensor::zeros(c, r, r);
        let mut g_ca = HeadGrad::zeros(&fwd.coarse_amodal);
        let mut g_cv = HeadGrad::zeros(&fwd.coarse_visible);
        add_scaled(&mut g_ca.logits, &bce_with_logits(fwd.coarse_amodal.logits.data(), &t.amodal).1, scale.amodal_coarse);
        add_scaled(&mut g_cv.logits, &bce_with_logits(fwd.coarse_visible.logits.data(), &t.visible).1, scale.visible_coarse);

        if let Some(rp) = &fwd.refined {
            let mut g_rv = HeadGrad::zeros(&rp.refined_visible);
            let mut g_ra = HeadGrad::zeros(&rp.refined_amodal);
            add_scaled(&mut g_rv.logits, &bce_with_logits(rp.refined_visible.logits.data(), &t.visible).1, scale.visible_refined);
            add_scaled(
                &mut g_ra.logits,
                &amodal_mask_loss(amodal_loss, rp.refined_amodal.logits.data(), &t.amodal).1,
                scale.amodal_refined,
            );
            if scale.visible_fm != 0.0 {
                matching_backward(&fwd.coarse_visible, &rp.refined_visible, fm, scale.visible_fm, &mut g_cv, &mut g_rv);
            }

            // f_a passes feed the attended feature; prior channels are constants
            let mut d_fa = Tensor::zeros(c, r, r);
            if let Some(m) = &rp.matching_amodal {
                if scale.amodal_fm != 0.0 {
                    let mut g_m = HeadGrad::zeros(m);
                    matching_backward(&fwd.coarse_amodal, m, fm, scale.amodal_fm, &mut g_ca, &mut g_m);
                    d_fa.add_assign(&self.amodal_head.backward(store, m, &g_m, grads).slice_channels(0, c));
                }
            }
            if scale.amodal_refined != 0.0 {
                d_fa.add_assign(&self.amodal_head.backward(store, &rp.refined_amodal, &g_ra, grads).slice_channels(0, c));
            }
            match &rp.amodal_attention {
                Some(att) => {
                    let d_att = masked_backward(f, &att.map, &d_fa, &mut df);
                    match att.source {
                        MaskSource::RefinedVisible => attention_backward(&rp.refined_visible, &d_att, r, &mut g_rv.logits),
                        MaskSource::CoarseAmodal => attention_backward(&fwd.coarse_amodal, &d_att, r, &mut g_ca.logits),
                        MaskSource::CoarseVisible => attention_backward(&fwd.coarse_visible, &d_att, r, &mut g_cv.logits),
                    }
                }
                None => df.add_assign(&d_fa),
            }

            if let Some((map, rc)) = &rp.reclass {
                if scale.reclass != 0.0 {
                    let mut d_logits = softmax_cross_entropy(&rc.logits, t.label).1;
                    d_logits.iter_mut().for_each(|g| *g *= scale.reclass * fm.lambda_rc);
                    let d_in = self.reclass_head.backward(store, rc, &d_logits, grads);
                    let d_in = Tensor::from_vec(c, r, r, d_in).expect("reclass input shape");
                    let d_att = masked_backward(f, map, &d_in, &mut df);
                    attention_backward(&rp.refined_visible, &d_att, r, &mut g_rv.logits);
                }
            }

            if !is_zero(&g_rv) {
                let d_in = self.visible_head.backward(store, &rp.refined_visible, &g_rv, grads);
                let att = &rp.visible_attention;
                let d_att = masked_backward(f, &att.map, &d_in, &mut df);
                match att.source {
                    MaskSource::CoarseAmodal => attention_backward(&fwd.coarse_amodal, &d_att, r, &mut g_ca.logits),
                    MaskSource::CoarseVisible => attention_backward(&fwd.coarse_visible, &d_att, r, &mut g_cv.logits),
                    MaskSource::RefinedVisible => unreachable!("visible refinement never attends to itself"),
                }
            }
        }

        if !is_zero(&g_cv) {
            df.add_assign(&self.visible_head.backward(store, &fwd.coarse_visible, &g_cv, grads));
        }
        if !is_zero(&g_ca) {
            df.add_assign(&self.amodal_head.backward(store, &fwd.coarse_amodal, &g_ca, grads).slice_channels(0, c));
        }
        df
    }
}

fn add_scaled(dst: &mut Tensor, g: &[f64], s: f64) {
    if s != 0.0 {
        dst.data_mut().iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
    }
}

fn is_zero(g: &HeadGrad) -> bool {
    g.logits.data().iter().all(|&v| v == 0.0) && g.acts.iter().all(Option::is_none)
}
