//! Dense masks, boxes and the mask algebra shared by every stage of the
//! pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold used wherever a probability mask is turned into a binary one.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// A dense H×W grid of values in `[0, 1]`, stored row-major.
///
/// Ground-truth masks hold only `0.0` and `1.0`; predictions hold
/// probabilities. Two masks are equal only if their resolutions match.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidMask(format!("empty resolution {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} cells, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidMask(format!("cell value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds a mask, clamping every value into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length");
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0);
        Self { height, width, data: vec![value.clamp(0.0, 1.0); height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn binarize(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| if v >= BINARIZE_THRESHOLD { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1.0 - v).collect(),
        }
    }

    /// Pixelwise `self ≤ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.resolution() == other.resolution()
            && self.data.iter().zip(&other.data).all(|(a, b)| a <= b)
    }

    /// Pixelwise maximum.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, f64::max)
    }

    /// Pixelwise `self · (1 − other)`.
    pub fn subtract(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a * (1.0 - b))
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, f64::min)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(f64, f64) -> f64) -> Result<Mask> {
        check_same_resolution(self, other)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Number of cells at or above the binarization threshold.
    pub fn count_on(&self) -> usize {
        self.data.iter().filter(|&&v| v >= BINARIZE_THRESHOLD).count()
    }
}

fn check_same_resolution(a: &Mask, b: &Mask) -> Result<()> {
    if a.resolution() != b.resolution() {
        return Err(Error::Shape(format!(
            "mask resolutions differ: {:?} vs {:?}",
            a.resolution(),
            b.resolution()
        )));
    }
    Ok(())
}

/// Sum of all cell values.
pub fn mask_area(m: &Mask) -> f64 {
    m.data.iter().sum()
}

/// `1 − area(visible)/area(amodal)`, clamped to `[0, 1]`.
pub fn occlusion_rate(visible: &Mask, amodal: &Mask) -> Result<f64> {
    check_same_resolution(visible, amodal)?;
    let amodal_area = mask_area(amodal);
    if amodal_area <= 0.0 {
        return Err(Error::InvalidAnnotation("amodal mask has zero area".into()));
    }
    Ok((1.0 - mask_area(visible) / amodal_area).clamp(0.0, 1.0))
}

/// IoU of the two masks after binarizing each at 0.5. Two empty masks have
/// IoU 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    check_same_resolution(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x >= BINARIZE_THRESHOLD, y >= BINARIZE_THRESHOLD);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_mask(m: &Mask, target: (usize, usize)) -> Mask {
    assert!(target.0 >= 1 && target.1 >= 1, "resize target must be at least 1x1");
    if m.resolution() == target {
        return m.clone();
    }
    let resizer = BilinearResize::new(m.resolution(), target);
    let mut out = vec![0.0; target.0 * target.1];
    resizer.forward(&m.data, &mut out);
    Mask::from_clamped(target.0, target.1, out)
}

#[derive(Debug, Clone, Copy)]
struct AxisTap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<AxisTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            AxisTap { i0, i1, w1: s - i0 as f64 }
        })
        .collect()
}

/// Separable bilinear resampling operator between two fixed grid sizes.
///
/// Used by [`resize_mask`] and, with its adjoint, by the attention path of
/// the mask heads where gradients must flow back through the resize.
#[derive(Debug, Clone)]
pub struct BilinearResize {
    src: (usize, usize),
    dst: (usize, usize),
    rows: Vec<AxisTap>,
    cols: Vec<AxisTap>,
}

impl BilinearResize {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self { src, dst, rows: axis_taps(src.0, dst.0), cols: axis_taps(src.1, dst.1) }
    }

    pub fn forward(&self, input: &[f64], output: &mut [f64]) {
        debug_assert_eq!(input.len(), self.src.0 * self.src.1);
        debug_assert_eq!(output.len(), self.dst.0 * self.dst.1);
        let sw = self.src.1;
        for (oy, r) in self.rows.iter().enumerate() {
            for (ox, c) in self.cols.iter().enumerate() {
                let top = input[r.i0 * sw + c.i0] * (1.0 - c.w1) + input[r.i0 * sw + c.i1] * c.w1;
                let bot = input[r.i1 * sw + c.i0] * (1.0 - c.w1) + input[r.i1 * sw + c.i1] * c.w1;
                output[oy * self.dst.1 + ox] = top * (1.0 - r.w1) + bot * r.w1;
            }
        }
    }

    /// Adjoint of [`forward`](Self::forward): accumulates `d_output` into `d_input`.
    pub fn backward(&self, d_output: &[f64], d_input: &mut [f64]) {
        let sw = self.src.1;
        for (oy, r) in self.rows.iter().enumerate() {
            for (ox, c) in self.cols.iter().enumerate() {
                let g = d_output[oy * self.dst.1 + ox];
                if g == 0.0 {
                    continue;
                }
                let (gt, gb) = (g * (1.0 - r.w1), g * r.w1);
                d_input[r.i0 * sw + c.i0] += gt * (1.0 - c.w1);
                d_input[r.i0 * sw + c.i1] += gt * c.w1;
                d_input[r.i1 * sw + c.i0] += gb * (1.0 - c.w1);
                d_input[r.i1 * sw + c.i1] += gb * c.w1;
            }
        }
    }
}

/// Axis-aligned box in continuous image coordinates; pixel `(x, y)` covers
/// `[x, x+1) × [y, y+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) || ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("({x_min}, {y_min}, {x_max}, {y_max})")));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// COCO `[x, y, w, h]` layout.
    pub fn from_xywh(xywh: [f64; 4]) -> Result<Self> {
        Self::new(xywh[0], xywh[1], xywh[0] + xywh[2], xywh[1] + xywh[3])
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) * 0.5, (self.y_min + self.y_max) * 0.5)
    }

    /// Clips to `[0, width] × [0, height]`; `None` when less than one pixel
    /// of area remains.
    pub fn clip(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let b = BoundingBox {
            x_min: self.x_min.clamp(0.0, width as f64),
            y_min: self.y_min.clamp(0.0, height as f64),
            x_max: self.x_max.clamp(0.0, width as f64),
            y_max: self.y_max.clamp(0.0, height as f64),
        };
        (b.width() > 0.0 && b.height() > 0.0 && b.area() >= 1.0).then_some(b)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Tight box around the binarized cells of `m`, or `None` if it is empty.
    pub fn from_mask(m: &Mask) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(y, x) >= BINARIZE_THRESHOLD {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BoundingBox {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: x1 as f64,
            y_max: y1 as f64,
        })
    }
}

/// Bilinear lookup at index coordinates (cell `k` centred on `k`), clamped
/// to the grid.
fn sample_clamped(data: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (wy, wx) = (y - y0 as f64, x - x0 as f64);
    let top = data[y0 * w + x0] * (1.0 - wx) + data[y0 * w + x1] * wx;
    let bot = data[y1 * w + x0] * (1.0 - wx) + data[y1 * w + x1] * wx;
    top * (1.0 - wy) + bot * wy
}

/// Resamples the region of an image-space mask under `b` onto an
/// `out.0 × out.1` grid.
pub fn crop_and_resize(m: &Mask, b: &BoundingBox, out: (usize, usize)) -> Mask {
    let (sy, sx) = (b.height() / out.0 as f64, b.width() / out.1 as f64);
    Mask::from_fn(out.0, out.1, |i, j| {
        let y = b.y_min + (i as f64 + 0.5) * sy - 0.5;
        let x = b.x_min + (j as f64 + 0.5) * sx - 0.5;
        sample_clamped(&m.data, m.height, m.width, y, x)
    })
}

/// Inverse of [`crop_and_resize`]: paints an ROI-frame mask back onto an
/// image-space canvas. Pixels whose centres fall outside `b` are 0.
pub fn paste_mask(roi_mask: &Mask, b: &BoundingBox, canvas: (usize, usize)) -> Mask {
    let (h, w) = roi_mask.resolution();
    let (sy, sx) = (h as f64 / b.height(), w as f64 / b.width());
    Mask::from_fn(canvas.0, canvas.1, |y, x| {
        let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
        if cy < b.y_min || cy > b.y_max || cx < b.x_min || cx > b.x_max {
            return 0.0;
        }
        sample_clamped(&roi_mask.data, h, w, (cy - b.y_min) * sy - 0.5, (cx - b.x_min) * sx - 0.5)
    })
}
