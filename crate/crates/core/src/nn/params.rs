use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Handle to one parameter array inside a [`ParamStore`].
///
/// Two layers holding the same `ParamId` share storage; this is how the
/// coarse and refined passes of a mask head use one set of weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Arena of named parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name} shape");
        assert!(self.params.iter().all(|p| p.name != name), "duplicate param {name}");
        self.params.push(Param { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialised weights, `std = sqrt(2 / fan_in)`.
    pub fn add_he<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { grads: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect() }
    }

    /// Overwrites values from `other`, matching parameters by name and shape.
    pub fn load_from(&mut self, other: &[Param]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Archive(format!(
                "parameter count mismatch: archive has {}, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        for src in other {
            let dst = self
                .params
                .iter_mut()
                .find(|p| p.name == src.name)
                .ok_or_else(|| Error::Archive(format!("unknown parameter {}", src.name)))?;
            if dst.shape != src.shape {
                return Err(Error::Archive(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    src.name, src.shape, dst.shape
                )));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().flatten().for_each(|g| *g = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_slice()))
    }
}
