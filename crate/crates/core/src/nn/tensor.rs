use crate::error::{Error, Result};

/// Dense channels × height × width block of `f64`, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { shape: [c, h, w], data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!("{} values for tensor {c}x{h}x{w}", data.len())));
        }
        Ok(Self { shape: [c, h, w], data })
    }

    /// A flat vector viewed as `n × 1 × 1`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: [data.len(), 1, 1], data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn plane(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn reshape(mut self, c: usize, h: usize, w: usize) -> Result<Self> {
        if c * h * w != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {c}x{h}x{w}", self.shape)));
        }
        self.shape = [c, h, w];
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "tensor add shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Channel-wise concatenation of two blocks with equal spatial size.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape[1..] != other.shape[1..] {
            return Err(Error::Shape(format!("concat {:?} with {:?}", self.shape, other.shape)));
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor { shape: [self.shape[0] + other.shape[0], self.shape[1], self.shape[2]], data })
    }

    /// Copies channels `[start, start + count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Tensor {
        let p = self.plane();
        Tensor {
            shape: [count, self.shape[1], self.shape[2]],
            data: self.data[start * p..(start + count) * p].to_vec(),
        }
    }

    /// Appends `extra` all-zero channels.
    pub fn zero_pad_channels(&self, extra: usize) -> Tensor {
        let mut data = self.data.clone();
        data.resize(self.data.len() + extra * self.plane(), 0.0);
        Tensor { shape: [self.shape[0] + extra, self.shape[1], self.shape[2]], data }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
