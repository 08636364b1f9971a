use rand::Rng;

use crate::mask::{BoundingBox, Mask};
use crate::nn::layers::{avg_pool2, avg_pool2_backward, relu_vec, relu_vec_backward};
use crate::nn::{relu, relu_backward, sigmoid, Conv2d, ConvTranspose2d, Gradients, Linear, ParamStore, Tensor};

/// Number of layers `S` whose activations take part in feature matching.
pub const MASK_HEAD_LAYERS: usize = 5;

/// Four 3×3 conv + ReLU layers followed by a 2×2 stride-2 deconvolution to
/// one logit channel; the mask is the logistic of those logits.
#[derive(Debug, Clone)]
pub struct MaskHead {
    pub convs: Vec<Conv2d>,
    pub deconv: ConvTranspose2d,
    pub in_channels: usize,
}

/// Per-layer activations of one mask-head pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub input: Tensor,
    pre: Vec<Tensor>,
    acts: Vec<Tensor>,
    pub logits: Tensor,
}

impl HeadTrace {
    /// `f^(j)` for `j` in `1..=5`: post-ReLU outputs of the convs, then the
    /// deconv logits.
    pub fn activation(&self, j: usize) -> &Tensor {
        assert!((1..=MASK_HEAD_LAYERS).contains(&j), "layer index {j} out of range");
        if j == MASK_HEAD_LAYERS {
            &self.logits
        } else {
            &self.acts[j - 1]
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.data().iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn mask(&self) -> Mask {
        Mask::from_clamped(self.logits.height(), self.logits.width(), self.probs())
    }

    /// Which ReLU units are active; changes only when a pre-activation
    /// crosses zero.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre.iter().flat_map(|p| p.data().iter().map(|&v| v > 0.0)).collect()
    }
}

/// Gradients arriving at a mask-head pass: on the logits and, optionally,
/// on intermediate activations (from feature matching).
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub logits: Tensor,
    pub acts: Vec<Option<Tensor>>,
}

impl HeadGrad {
    pub fn zeros(trace: &HeadTrace) -> Self {
        let [c, h, w] = trace.logits.shape();
        Self { logits: Tensor::zeros(c, h, w), acts: vec![None; MASK_HEAD_LAYERS - 1] }
    }

    /// Adds `g` to the gradient of activation `j` (1-based).
    pub fn add_activation(&mut self, j: usize, g: &Tensor) {
        if j == MASK_HEAD_LAYERS {
            self.logits.add_assign(g);
            return;
        }
        match &mut self.acts[j - 1] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

impl MaskHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_channels: usize, width: usize, rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(4);
        let mut c = in_channels;
        for i in 0..4 {
            convs.push(Conv2d::new(store, &format!("{name}.conv{}", i + 1), c, width, 3, 1, 1, rng));
            c = width;
        }
        let deconv = ConvTranspose2d::new(store, &format!("{name}.deconv"), width, 1, 2, 2, 0, rng);
        Self { convs, deconv, in_channels }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> HeadTrace {
        assert_eq!(x.channels(), self.in_channels, "mask head expects {} input channels", self.in_channels);
        let mut pre = Vec::with_capacity(4);
        let mut acts = Vec::with_capacity(4);
        let mut h = x.clone();
        for conv in &self.convs {
            let p = conv.forward(store, &h);
            h = relu(&p);
            pre.push(p);
            acts.push(h.clone());
        }
        let logits = self.deconv.forward(store, &h);
        HeadTrace { input: x.clone(), pre, acts, logits }
    }

    /// Backpropagates `g` through the pass recorded in `trace`, returning the
    /// gradient w.r.t. the head input.
    pub fn backward(&self, store: &ParamStore, trace: &HeadTrace, g: &HeadGrad, grads: &mut Gradients) -> Tensor {
        let mut d = self.deconv.backward(store, &trace.acts[3], &g.logits, grads);
        for i in (0..4).rev() {
            if let Some(extra) = &g.acts[i] {
                d.add_assign(extra);
            }
            let dp = relu_backward(&trace.pre[i], &d);
            let input = if i == 0 { &trace.input } else { &trace.acts[i - 1] };
            d = self.convs[i].backward(store, input, &dp, grads);
        }
        d
    }
}

/// Per-box class and box-regression head: 2×2 average pooling, one hidden
/// FC layer, then class logits (background at index 0) and 4 deltas.
#[derive(Debug, Clone)]
pub struct BoxHead {
    pub fc: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

#[derive(Debug, Clone)]
pub struct BoxTrace {
    input_shape: [usize; 3],
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub box_deltas: Vec<f64>,
}

impl BoxHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        channels: usize,
        roi_size: usize,
        hidden: usize,
        num_categories: usize,
        rng: &mut R,
    ) -> Self {
        let pooled = channels * (roi_size / 2) * (roi_size / 2);
        Self {
            fc: Linear::new(store, "box_head.fc", pooled, hidden, rng),
            cls: Linear::new(store, "box_head.cls", hidden, num_categories + 1, rng),
            reg: Linear::new(store, "box_head.reg", hidden, 4, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, f: &Tensor) -> BoxTrace {
        let pooled = avg_pool2(f).into_data();
        let hidden_pre = self.fc.forward(store, &pooled);
        let hidden = relu_vec(&hidden_pre);
        let class_logits = self.cls.forward(store, &hidden);
        let box_deltas = self.reg.forward(store, &hidden);
        BoxTrace { input_shape: f.shape(), pooled, hidden_pre, hidden, class_logits, box_deltas }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        trace: &BoxTrace,
        d_logits: &[f64],
        d_deltas: &[f64],
        grads: &mut Gradients,
    ) -> Tensor {
        let mut dh = self.cls.backward(store, &trace.hidden, d_logits, grads);
        let dh2 = self.reg.backward(store, &trace.hidden, d_deltas, grads);
        dh.iter_mut().zip(dh2).for_each(|(a, b)| *a += b);
        let dp = relu_vec_backward(&trace.hidden_pre, &dh);
        let dpool = self.fc.backward(store, &trace.pooled, &dp, grads);
        let [c, h, w] = trace.input_shape;
        let dpool = Tensor::from_vec(c, h / 2, w / 2, dpool).expect("pooled gradient shape");
        avg_pool2_backward([c, h, w], &dpool)
    }
}

/// Regression weights on `(dx, dy, dw, dh)`.
pub const BOX_DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

pub fn encode_box(proposal: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (px, py) = proposal.center();
    let (gx, gy) = target.center();
    let [wx, wy, ww, wh] = BOX_DELTA_WEIGHTS;
    [wx * (gx - px) / pw, wy * (gy - py) / ph, ww * (target.width() / pw).ln(), wh * (target.height() / ph).ln()]
}

pub fn decode_box(proposal: &BoundingBox, deltas: &[f64]) -> BoundingBox {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (px, py) = proposal.center();
    let [wx, wy, ww, wh] = BOX_DELTA_WEIGHTS;
    let cx = px + deltas[0] / wx * pw;
    let cy = py + deltas[1] / wy * ph;
    let w = pw * (deltas[2] / ww).min(MAX_LOG_SCALE).exp();
    let h = ph * (deltas[3] / wh).min(MAX_LOG_SCALE).exp();
    BoundingBox { x_min: cx - 0.5 * w, y_min: cy - 0.5 * h, x_max: cx + 0.5 * w, y_max: cy + 0.5 * h }
}

/// `f_rc`: two FC layers from the flattened masked ROI feature to one logit
/// per category (no background).
#[derive(Debug, Clone)]
pub struct ReclassHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct ReclassTrace {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ReclassTrace {
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.hidden_pre.iter().map(|&v| v > 0.0).collect()
    }
}

impl ReclassHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        channels: usize,
        roi_size: usize,
        hidden: usize,
        num_categories: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, "reclass.fc1", channels * roi_size * roi_size, hidden, rng),
            fc2: Linear::new(store, "reclass.fc2", hidden, num_categories, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, f: &Tensor) -> ReclassTrace {
        let input = f.data().to_vec();
        let hidden_pre = self.fc1.forward(store, &input);
        let hidden = relu_vec(&hidden_pre);
        let logits = self.fc2.forward(store, &hidden);
        ReclassTrace { input, hidden_pre, hidden, logits }
    }

    pub fn backward(&self, store: &ParamStore, trace: &ReclassTrace, d_logits: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let dh = self.fc2.backward(store, &trace.hidden, d_logits, grads);
        let dp = relu_vec_backward(&trace.hidden_pre, &dh);
        self.fc1.backward(store, &trace.input, &dp, grads)
    }
}
