//! Parameter storage, Adam and a plateau learning-rate schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zero-filled buffers matching every parameter.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }
}

/// Uniform initialization in `±√(6/fan)`, drawn from a named substream.
pub fn init_uniform(shape: Vec<usize>, fan: usize, seed: u64, name: &str) -> Tensor {
    let bound = (6.0 / fan.max(1) as f64).sqrt();
    let mut rng = substream(seed, name, 0);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Moment buffers and step count of [`Adam`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::new(params),
        }
    }

    /// One bias-corrected update with gradients aligned to `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                self.state.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params.get(i).len() || self.state.m[i].len() != g.len() {
                return Err(Error::invalid(format!("gradient {i} does not match its parameter")));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved for more than `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records an epoch loss; returns the (possibly decayed) learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            lr
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.bad_epochs = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.5, 5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::new(vec![1], vec![w]).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, -5.0, 42.0] {
            let mut p = scalar_store(1.0);
            let mut adam = Adam::new(&p, 0.01);
            adam.step(&mut p, &[vec![g]]).unwrap();
            let delta = p.get(0).data()[0] - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 1e-6, "g={g} delta={delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(2.5);
        let mut adam = Adam::new(&p, 0.1);
        for _ in 0..5 {
            adam.step(&mut p, &[vec![0.0]]).unwrap();
        }
        assert_eq!(p.get(0).data()[0], 2.5);
    }

    #[test]
    fn descends_quadratic() {
        let mut p = scalar_store(0.0);
        let mut adam = Adam::new(&p, 0.1);
        for _ in 0..100 {
            let w = p.get(0).data()[0];
            adam.step(&mut p, &[vec![2.0 * (w - 3.0)]]).unwrap();
        }
        assert!((p.get(0).data()[0] - 3.0).abs() < 0.2, "w={}", p.get(0).data()[0]);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut p = scalar_store(0.0);
        let mut adam = Adam::new(&p, 0.1);
        assert!(adam.step(&mut p, &[]).is_err());
        assert!(adam.step(&mut p, &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = PlateauScheduler::new(0.5, 2);
        let mut lr = 1.0;
        lr = s.observe(1.0, lr);
        for _ in 0..2 {
            lr = s.observe(1.0, lr);
            assert_eq!(lr, 1.0);
        }
        lr = s.observe(1.0, lr);
        assert_eq!(lr, 0.5);
        lr = s.observe(0.5, lr);
        assert_eq!(lr, 0.5);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = init_uniform(vec![5, 3, 4], 19, 7, "conv0");
        let b = init_uniform(vec![5, 3, 4], 19, 7, "conv0");
        let c = init_uniform(vec![5, 3, 4], 19, 7, "conv1");
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f64 / 19.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
