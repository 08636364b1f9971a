//! Strided conv feature extractor and ROI resampling.

use image::RgbImage;
use rand::Rng;

use super::config::BackboneConfig;
use crate::mask::BoundingBox;
use crate::nn::{relu, relu_backward, Conv2d, Gradients, ParamStore, Tensor};
use crate::types::RoiFeature;

pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0 - 0.5;
        }
    }
    t
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Conv2d>,
    pub project: Conv2d,
}

/// Activations of one image pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ImageTrace {
    input: Tensor,
    pre: Vec<Tensor>,
    maps: Vec<Tensor>,
}

impl ImageTrace {
    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.input.height(), self.input.width())
    }

    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre.iter().flat_map(|p| p.data().iter().map(|&v| v > 0.0)).collect()
    }

    pub fn zero_map_grads(&self) -> Vec<Tensor> {
        self.maps.iter().map(|m| Tensor::zeros(m.channels(), m.height(), m.width())).collect()
    }
}

/// Activations of one ROI feature extraction.
#[derive(Debug, Clone)]
pub struct RoiTrace {
    pub bbox: BoundingBox,
    hyper: Tensor,
    pre: Tensor,
    pub feature: Tensor,
}

impl RoiTrace {
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre.data().iter().map(|&v| v > 0.0).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
    valid: bool,
}

/// Bilinear taps along one axis for `n` bins spanning `[start, start+len)`
/// in image coordinates on a map of `size` cells with the given stride.
fn roi_taps(start: f64, len: f64, n: usize, stride: f64, size: usize) -> Vec<Tap> {
    (0..n)
        .map(|i| {
            let p = (start + (i as f64 + 0.5) * len / n as f64) / stride - 0.5;
            if p < -1.0 || p > size as f64 {
                return Tap { lo: 0, hi: 0, w_hi: 0.0, valid: false };
            }
            let p = p.clamp(0.0, (size - 1) as f64);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(size - 1);
            Tap { lo, hi, w_hi: if lo == hi { 0.0 } else { p - lo as f64 }, valid: true }
        })
        .collect()
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Self {
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in config.stage_widths.iter().enumerate() {
            stages.push(Conv2d::new(store, &format!("backbone.stage{}", i + 1), in_ch, w, 3, 2, 1, rng));
            in_ch = w;
        }
        let hyper: usize = config.stage_widths.iter().sum();
        let project = Conv2d::new(store, "backbone.roi_project", hyper, config.roi_channels, 1, 1, 0, rng);
        Self { config: config.clone(), stages, project }
    }

    pub fn stage_strides(&self) -> Vec<f64> {
        (1..=self.stages.len()).map(|i| (1usize << i) as f64).collect()
    }

    pub fn forward_image(&self, store: &ParamStore, image: &Tensor) -> ImageTrace {
        let mut pre = Vec::new();
        let mut maps = Vec::new();
        let mut x = image.clone();
        for s in &self.stages {
            let p = s.forward(store, &x);
            x = relu(&p);
            pre.push(p);
            maps.push(x.clone());
        }
        ImageTrace { input: image.clone(), pre, maps }
    }

    pub fn backward_image(&self, store: &ParamStore, trace: &ImageTrace, d_maps: Vec<Tensor>, grads: &mut Gradients) {
        let mut carry: Option<Tensor> = None;
        for (i, mut d) in d_maps.into_iter().enumerate().rev() {
            if let Some(c) = carry.take() {
                d.add_assign(&c);
            }
            let dp = relu_backward(&trace.pre[i], &d);
            let input = if i == 0 { &trace.input } else { &trace.maps[i - 1] };
            let dx = self.stages[i].backward(store, input, &dp, grads);
            if i > 0 {
                carry = Some(dx);
            }
        }
    }

    fn align(&self, trace: &ImageTrace, b: &BoundingBox) -> Tensor {
        let n = self.config.roi_size;
        let total: usize = trace.maps.iter().map(|m| m.channels()).sum();
        let mut out = Tensor::zeros(total, n, n);
        let mut c0 = 0;
        for (map, stride) in trace.maps.iter().zip(self.stage_strides()) {
            let rows = roi_taps(b.y_min, b.height(), n, stride, map.height());
            let cols = roi_taps(b.x_min, b.width(), n, stride, map.width());
            let w = map.width();
            for c in 0..map.channels() {
                let src = map.channel(c);
                let dst = out.channel_mut(c0 + c);
                for (i, r) in rows.iter().enumerate() {
                    if !r.valid {
                        continue;
                    }
                    for (j, q) in cols.iter().enumerate() {
                        if !q.valid {
                            continue;
                        }
                        let top = src[r.lo * w + q.lo] * (1.0 - q.w_hi) + src[r.lo * w + q.hi] * q.w_hi;
                        let bot = src[r.hi * w + q.lo] * (1.0 - q.w_hi) + src[r.hi * w + q.hi] * q.w_hi;
                        dst[i * n + j] = top * (1.0 - r.w_hi) + bot * r.w_hi;
                    }
                }
            }
            c0 += map.channels();
        }
        out
    }

    fn align_backward(&self, trace: &ImageTrace, b: &BoundingBox, d_hyper: &Tensor, d_maps: &mut [Tensor]) {
        let n = self.config.roi_size;
        let mut c0 = 0;
        for ((map, stride), dmap) in trace.maps.iter().zip(self.stage_strides()).zip(d_maps.iter_mut()) {
            let rows = roi_taps(b.y_min, b.height(), n, stride, map.height());
            let cols = roi_taps(b.x_min, b.width(), n, stride, map.width());
            let w = map.width();
            for c in 0..map.channels() {
                let g = d_hyper.channel(c0 + c);
                let dst = dmap.channel_mut(c);
                for (i, r) in rows.iter().enumerate() {
                    if !r.valid {
                        continue;
                    }
                    for (j, q) in cols.iter().enumerate() {
                        if !q.valid {
                            continue;
                        }
                        let v = g[i * n + j];
                        let (vt, vb) = (v * (1.0 - r.w_hi), v * r.w_hi);
                        dst[r.lo * w + q.lo] += vt * (1.0 - q.w_hi);
                        dst[r.lo * w + q.hi] += vt * q.w_hi;
                        dst[r.hi * w + q.lo] += vb * (1.0 - q.w_hi);
                        dst[r.hi * w + q.hi] += vb * q.w_hi;
                    }
                }
            }
            c0 += map.channels();
        }
    }

    pub fn roi_forward(&self, store: &ParamStore, trace: &ImageTrace, b: &BoundingBox) -> RoiTrace {
        let hyper = self.align(trace, b);
        let pre = self.project.forward(store, &hyper);
        let feature = relu(&pre);
        RoiTrace { bbox: *b, hyper, pre, feature }
    }

    /// Accumulates the ROI feature gradient into per-stage map gradients.
    pub fn roi_backward(
        &self,
        store: &ParamStore,
        trace: &ImageTrace,
        roi: &RoiTrace,
        d_feature: &Tensor,
        d_maps: &mut [Tensor],
        grads: &mut Gradients,
    ) {
        let dp = relu_backward(&roi.pre, d_feature);
        let d_hyper = self.project.backward(store, &roi.hyper, &dp, grads);
        self.align_backward(trace, &roi.bbox, &d_hyper, d_maps);
    }

    /// ROI features for every box that keeps at least one pixel of area
    /// after clipping; degenerate boxes are skipped with a warning.
    pub fn extract_roi_features(&self, store: &ParamStore, image: &RgbImage, boxes: &[BoundingBox]) -> Vec<RoiFeature> {
        let trace = self.forward_image(store, &image_to_tensor(image));
        let (h, w) = trace.image_size();
        boxes
            .iter()
            .filter_map(|b| match b.clip(w, h) {
                Some(c) => Some(RoiFeature { features: self.roi_forward(store, &trace, &c).feature, source_box: c }),
                None => {
                    log::warn!("skipping degenerate ROI {b:?}");
                    None
                }
            })
            .collect()
    }
}
