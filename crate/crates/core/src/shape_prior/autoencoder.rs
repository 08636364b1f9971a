use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_iou, Mask};
use crate::nn::layers::{relu_vec, relu_vec_backward};
use crate::nn::loss::bce_with_logits;
use crate::nn::{relu, relu_backward, sigmoid, Adam, Conv2d, ConvTranspose2d, Gradients, Linear, ParamStore, Tensor};
use crate::types::MASK_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { dim: 32, epochs: 30, batch_size: 16, learning_rate: 2e-3, seed: 0 }
    }
}

/// 28×28 mask ↔ `D`-dim embedding. Encoder: two stride-2 convs and a linear
/// map; decoder: a linear map and two stride-2 deconvs ending in a sigmoid.
#[derive(Debug, Clone)]
pub struct MaskAutoencoder {
    pub store: ParamStore,
    enc1: Conv2d,
    enc2: Conv2d,
    enc_fc: Linear,
    dec_fc: Linear,
    dec1: ConvTranspose2d,
    dec2: ConvTranspose2d,
    dim: usize,
}

const E1: usize = 8;
const E2: usize = 16;
const SIDE: usize = MASK_SIZE / 4;
const FLAT: usize = E2 * SIDE * SIDE;

struct Trace {
    x: Tensor,
    p1: Tensor,
    a1: Tensor,
    p2: Tensor,
    a2: Tensor,
    z: Vec<f64>,
    q: Vec<f64>,
    h: Tensor,
    p3: Tensor,
    a3: Tensor,
    logits: Tensor,
}

impl MaskAutoencoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc1 = Conv2d::new(&mut store, "ae.enc1", 1, E1, 3, 2, 1, &mut rng);
        let enc2 = Conv2d::new(&mut store, "ae.enc2", E1, E2, 3, 2, 1, &mut rng);
        let enc_fc = Linear::new(&mut store, "ae.enc_fc", FLAT, dim, &mut rng);
        let dec_fc = Linear::new(&mut store, "ae.dec_fc", dim, FLAT, &mut rng);
        let dec1 = ConvTranspose2d::new(&mut store, "ae.dec1", E2, E1, 2, 2, 0, &mut rng);
        let dec2 = ConvTranspose2d::new(&mut store, "ae.dec2", E1, 1, 2, 2, 0, &mut rng);
        Ok(Self { store, enc1, enc2, enc_fc, dec_fc, dec1, dec2, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn input(m: &Mask) -> Result<Tensor> {
        if m.resolution() != (MASK_SIZE, MASK_SIZE) {
            return Err(Error::Shape(format!("autoencoder expects {MASK_SIZE}x{MASK_SIZE} masks, got {:?}", m.resolution())));
        }
        Tensor::from_vec(1, MASK_SIZE, MASK_SIZE, m.data().to_vec())
    }

    fn forward(&self, m: &Mask) -> Result<Trace> {
        let s = &self.store;
        let x = Self::input(m)?;
        let p1 = self.enc1.forward(s, &x);
        let a1 = relu(&p1);
        let p2 = self.enc2.forward(s, &a1);
        let a2 = relu(&p2);
        let z = self.enc_fc.forward(s, a2.data());
        let q = self.dec_fc.forward(s, &z);
        let h = Tensor::from_vec(E2, SIDE, SIDE, relu_vec(&q))?;
        let p3 = self.dec1.forward(s, &h);
        let a3 = relu(&p3);
        let logits = self.dec2.forward(s, &a3);
        Ok(Trace { x, p1, a1, p2, a2, z, q, h, p3, a3, logits })
    }

    pub fn encode(&self, m: &Mask) -> Result<Vec<f64>> {
        let s = &self.store;
        let x = Self::input(m)?;
        let a1 = relu(&self.enc1.forward(s, &x));
        let a2 = relu(&self.enc2.forward(s, &a1));
        Ok(self.enc_fc.forward(s, a2.data()))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Mask> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!("embedding has {} entries, expected {}", z.len(), self.dim)));
        }
        let s = &self.store;
        let h = Tensor::from_vec(E2, SIDE, SIDE, relu_vec(&self.dec_fc.forward(s, z)))?;
        let a3 = relu(&self.dec1.forward(s, &h));
        let logits = self.dec2.forward(s, &a3);
        Ok(Mask::from_clamped(MASK_SIZE, MASK_SIZE, logits.data().iter().map(|&v| sigmoid(v)).collect()))
    }

    pub fn reconstruct(&self, m: &Mask) -> Result<Mask> {
        self.decode(&self.encode(m)?)
    }

    /// Reconstruction BCE of one mask, accumulating parameter gradients.
    fn loss_and_grad(&self, m: &Mask, grads: &mut Gradients) -> Result<f64> {
        let s = &self.store;
        let t = self.forward(m)?;
        let (loss, g) = bce_with_logits(t.logits.data(), m.data());
        let g = Tensor::from_vec(1, MASK_SIZE, MASK_SIZE, g)?;
        let d_a3 = self.dec2.backward(s, &t.a3, &g, grads);
        let d_h = self.dec1.backward(s, &t.h, &relu_backward(&t.p3, &d_a3), grads);
        let d_q = relu_vec_backward(&t.q, d_h.data());
        let d_z = self.dec_fc.backward(s, &t.z, &d_q, grads);
        let d_a2 = self.enc_fc.backward(s, t.a2.data(), &d_z, grads);
        let d_a2 = Tensor::from_vec(E2, SIDE, SIDE, d_a2)?;
        let d_a1 = self.enc2.backward(s, &t.a1, &relu_backward(&t.p2, &d_a2), grads);
        self.enc1.backward(s, &t.x, &relu_backward(&t.p1, &d_a1), grads);
        Ok(loss)
    }

    pub fn reconstruction_loss(&self, masks: &[Mask]) -> Result<f64> {
        let mut total = 0.0;
        for m in masks {
            let t = self.forward(m)?;
            total += bce_with_logits(t.logits.data(), m.data()).0;
        }
        Ok(total / masks.len().max(1) as f64)
    }

    /// Mean IoU between masks and their binarized reconstructions.
    pub fn reconstruction_iou(&self, masks: &[Mask]) -> Result<f64> {
        let mut total = 0.0;
        for m in masks {
            total += mask_iou(m, &self.reconstruct(m)?)?;
        }
        Ok(total / masks.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderReport {
    /// Mean reconstruction BCE over all training masks after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains on binary 28×28 masks with Adam on mini-batches in a seeded order.
pub fn train_autoencoder(masks: &[Mask], config: &AutoencoderConfig) -> Result<(MaskAutoencoder, AutoencoderReport)> {
    if masks.is_empty() {
        return Err(Error::Build("no masks to train the autoencoder on".into()));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("autoencoder batch size and learning rate must be positive".into()));
    }
    let mut ae = MaskAutoencoder::new(config.dim, config.seed)?;
    let mut adam = Adam::new(&ae.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..masks.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = ae.store.zero_grads();
            for &i in batch {
                ae.loss_and_grad(&masks[i], &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut ae.store, &grads);
        }
        epoch_losses.push(ae.reconstruction_loss(masks)?);
    }
    Ok((ae, AutoencoderReport { epoch_losses }))
}
