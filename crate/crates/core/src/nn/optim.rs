use super::params::{Gradients, ParamStore};

/// SGD with momentum and L2 weight decay, in the PyTorch formulation:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { lr, momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let g = grads.get(id);
            let v = &mut self.velocity[id.index()];
            for ((p, &gi), vi) in store.get_mut(id).iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gi + self.weight_decay * *p;
                *vi = self.momentum * *vi + d;
                *p -= self.lr * *vi;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let p = store.get_mut(id);
            for j in 0..p.len() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g[j];
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = self.m[i][j] / bc1;
                let vh = self.v[i][j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
