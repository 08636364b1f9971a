//! Layers with explicit forward/backward passes.
//!
//! Layers hold only [`ParamId`]s; values live in a [`ParamStore`] and
//! gradients are accumulated into a [`Gradients`] buffer. A backward call
//! needs the same input tensor that was given to forward.

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slice bounds asserted above cover every element the
    // strided views touch, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_he(format!("{name}.weight"), vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng);
        let bias = store.add_zeros(format!("{name}.bias"), vec![out_ch]);
        Self { weight, bias, in_ch, out_ch, kernel, stride, padding }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor, ho: usize, wo: usize) -> Vec<f64> {
        let (h, w) = (x.height(), x.width());
        let k = self.kernel;
        let p = ho * wo;
        let mut cols = vec![0.0; self.in_ch * k * k * p];
        for ic in 0..self.in_ch {
            let plane = x.channel(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ic * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
        let k = self.kernel;
        let p = ho * wo;
        let mut dx = Tensor::zeros(self.in_ch, h, w);
        for ic in 0..self.in_ch {
            let plane = dx.channel_mut(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ic * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_ch, "conv input channels");
        let (ho, wo) = self.output_size(x.height(), x.width());
        let p = ho * wo;
        let kk = self.in_ch * self.kernel * self.kernel;
        let cols = self.im2col(x, ho, wo);
        let bias = store.get(self.bias);
        let mut out = Tensor::zeros(self.out_ch, ho, wo);
        for (oc, &b) in bias.iter().enumerate() {
            out.channel_mut(oc).fill(b);
        }
        gemm(self.out_ch, kk, p, store.get(self.weight), (kk, 1), &cols, (p, 1), 1.0, out.data_mut());
        out
    }

    pub fn backward(&self, store: &ParamStore, x: &Tensor, dy: &Tensor, grads: &mut Gradients) -> Tensor {
        let (ho, wo) = (dy.height(), dy.width());
        let p = ho * wo;
        let kk = self.in_ch * self.kernel * self.kernel;
        let cols = self.im2col(x, ho, wo);
        gemm(self.out_ch, p, kk, dy.data(), (p, 1), &cols, (1, p), 1.0, grads.get_mut(self.weight));
        let db = grads.get_mut(self.bias);
        for (oc, g) in db.iter_mut().enumerate() {
            *g += dy.channel(oc).iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; kk * p];
        gemm(kk, self.out_ch, p, store.get(self.weight), (1, kk), dy.data(), (p, 1), 0.0, &mut dcols);
        self.col2im(&dcols, x.height(), x.width(), ho, wo)
    }
}

/// Transposed convolution; weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel / (stride * stride).max(1);
        let weight = store.add_he(format!("{name}.weight"), vec![in_ch, out_ch, kernel, kernel], fan_in.max(1), rng);
        let bias = store.add_zeros(format!("{name}.bias"), vec![out_ch]);
        Self { weight, bias, in_ch, out_ch, kernel, stride, padding }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel - 2 * self.padding,
            (w - 1) * self.stride + self.kernel - 2 * self.padding,
        )
    }

    /// Calls `f(input_cell, output_cell)` for every input cell whose tap
    /// `(ky, kx)` lands inside the output.
    #[inline]
    fn for_each_cell(&self, (h, w): (usize, usize), (ho, wo): (usize, usize), ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        for iy in 0..h {
            let oy = (iy * self.stride + ky) as isize - self.padding as isize;
            if oy < 0 || oy >= ho as isize {
                continue;
            }
            for ix in 0..w {
                let ox = (ix * self.stride + kx) as isize - self.padding as isize;
                if ox >= 0 && ox < wo as isize {
                    f(iy * w + ix, oy as usize * wo + ox as usize);
                }
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_ch, "deconv input channels");
        let (h, w) = (x.height(), x.width());
        let (ho, wo) = self.output_size(h, w);
        let (k, p) = (self.kernel, h * w);
        let rows = self.out_ch * k * k;
        // cols[(oc, ky, kx), cell] = Σ_ic W[ic, oc, ky, kx] · x[ic, cell]
        let mut cols = vec![0.0; rows * p];
        gemm(rows, self.in_ch, p, store.get(self.weight), (1, rows), x.data(), (p, 1), 0.0, &mut cols);
        let mut out = Tensor::zeros(self.out_ch, ho, wo);
        for (oc, &b) in store.get(self.bias).iter().enumerate() {
            let o = out.channel_mut(oc);
            o.fill(b);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((oc * k + ky) * k + kx) * p..][..p];
                    self.for_each_cell((h, w), (ho, wo), ky, kx, |i, j| o[j] += row[i]);
                }
            }
        }
        out
    }

    pub fn backward(&self, store: &ParamStore, x: &Tensor, dy: &Tensor, grads: &mut Gradients) -> Tensor {
        let (h, w) = (x.height(), x.width());
        let (ho, wo) = (dy.height(), dy.width());
        let (k, p) = (self.kernel, h * w);
        let rows = self.out_ch * k * k;
        let mut dcols = vec![0.0; rows * p];
        for oc in 0..self.out_ch {
            let g = dy.channel(oc);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut dcols[((oc * k + ky) * k + kx) * p..][..p];
                    self.for_each_cell((h, w), (ho, wo), ky, kx, |i, j| row[i] = g[j]);
                }
            }
        }
        gemm(self.in_ch, p, rows, x.data(), (p, 1), &dcols, (1, p), 1.0, grads.get_mut(self.weight));
        let mut dx = Tensor::zeros(self.in_ch, h, w);
        gemm(self.in_ch, rows, p, store.get(self.weight), (rows, 1), &dcols, (p, 1), 0.0, dx.data_mut());
        let db = grads.get_mut(self.bias);
        for (oc, g) in db.iter_mut().enumerate() {
            *g += dy.channel(oc).iter().sum::<f64>();
        }
        dx
    }
}

/// Fully connected layer over a flattened input; weight layout `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_he(format!("{name}.weight"), vec![out_dim, in_dim], in_dim, rng);
        let bias = store.add_zeros(format!("{name}.bias"), vec![out_dim]);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim, "linear input dim");
        let weight = store.get(self.weight);
        store
            .get(self.bias)
            .iter()
            .zip(weight.chunks_exact(self.in_dim))
            .map(|(&b, row)| b + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, store: &ParamStore, x: &[f64], dy: &[f64], grads: &mut Gradients) -> Vec<f64> {
        for (row, &d) in grads.get_mut(self.weight).chunks_exact_mut(self.in_dim).zip(dy) {
            if d != 0.0 {
                row.iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
            }
        }
        for (g, d) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; self.in_dim];
        for (row, &d) in store.get(self.weight).chunks_exact(self.in_dim).zip(dy) {
            if d != 0.0 {
                dx.iter_mut().zip(row).for_each(|(g, a)| *g += d * a);
            }
        }
        dx
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its pre-activation input.
pub fn relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &p) in dx.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn relu_vec_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter().zip(dy).map(|(&p, &d)| if p > 0.0 { d } else { 0.0 }).collect()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.channels(), x.height() / 2, x.width() / 2);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let s = x.at(ch, 2 * y, 2 * xx) + x.at(ch, 2 * y + 1, 2 * xx) + x.at(ch, 2 * y, 2 * xx + 1) + x.at(ch, 2 * y + 1, 2 * xx + 1);
                out.data_mut()[(ch * h + y) * w + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(input_shape: [usize; 3], dy: &Tensor) -> Tensor {
    let [c, h, w] = input_shape;
    let mut dx = Tensor::zeros(c, h, w);
    let (ho, wo) = (dy.height(), dy.width());
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let g = 0.25 * dy.at(ch, y, xx);
                let d = dx.data_mut();
                for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    d[(ch * h + 2 * y + dy_) * w + 2 * xx + dx_] += g;
                }
            }
        }
    }
    dx
}
