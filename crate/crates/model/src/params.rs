//! Named parameter storage, gradients and the AdamW optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ModelError, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    /// Whether weight decay applies (matrices yes, biases and norms no).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix drawn from N(0, 0.02²).
    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, 0.02).expect("valid normal");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Mat::from_vec(rows, cols, data), true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros(rows, cols), false)
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::from_vec(rows, cols, vec![1.0; rows * cols]), false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces every value from `(name, matrix)` pairs, requiring an exact
    /// match of names and shapes.
    pub fn load(&mut self, tensors: Vec<(String, Mat)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.params.len()
            )));
        }
        let mut seen = vec![false; self.params.len()];
        for (name, m) in tensors {
            let i =
                *self.index.get(&name).ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {name}")))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(ModelError::Checkpoint(format!("tensor {name} appears twice")));
            }
            let p = &mut self.params[i];
            if p.value.shape() != m.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    p.value.shape()
                )));
            }
            if !m.is_finite() {
                return Err(ModelError::Checkpoint(format!("tensor {name} has non-finite values")));
            }
            p.value = m;
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulator.
#[derive(Clone, Debug)]
pub struct Grads {
    pub slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.slots[id.0] {
            Some(m) => m.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.slots[i] {
                    Some(m) => m.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.slots.iter_mut().flatten() {
            m.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().flat_map(|m| m.data.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Linear warmup to the peak rate followed by linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let rest = self.total.saturating_sub(self.warmup).max(1) as f64;
        let done = (step - self.warmup) as f64;
        self.peak_lr * (1.0 - done / rest).max(0.0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || params.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.params.iter_mut().enumerate() {
            let Some(g) = &grads.slots[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            for (((w, g), m), v) in p.value.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= lr * (step + wd * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule { peak_lr: 1.0, warmup: 10, total: 110 };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(500), 0.0);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Mat::scalar(1.0), true);
        let mut opt = AdamW::new(&ps, 0.0);
        let mut g = Grads::new(1);
        g.accumulate(id, &Mat::scalar(2.0));
        opt.update(&mut ps, &g, 0.1);
        assert!((ps.value(id).item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut ps = ParamStore::new();
        ps.zeros("b", 1, 3);
        assert!(ps.load(vec![("b".into(), Mat::zeros(1, 2))]).is_err());
        assert!(ps.load(vec![("c".into(), Mat::zeros(1, 3))]).is_err());
        assert!(ps.load(vec![("b".into(), Mat::zeros(1, 3))]).is_ok());
    }
}
