use std::hash::{Hash, Hasher};

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::Float;

/// Flat list of named 2-D parameter tensors (biases and gains are 1×n).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    tensors: Vec<Array2<F>>,
    names: Vec<String>,
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn from_tensors(tensors: Vec<Array2<F>>) -> Self {
        let names = (0..tensors.len()).map(|i| format!("p{i}")).collect();
        Self { tensors, names }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Array2<F>) -> usize {
        self.tensors.push(t);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Array2<F> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<F> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            names: self.names.clone(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(F::zero());
        }
    }

    pub fn scale(&mut self, c: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * c);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| {
                let x = v.to_f64().unwrap();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in &self.tensors {
            t.shape().hash(&mut h);
            for v in t.iter() {
                v.to_f64().unwrap().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap()))
                .collect(),
            names: self.names.clone(),
        }
    }
}

impl<F: Float> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<F> {
    pub config: AdamConfig,
    m: ParamSet<F>,
    v: ParamSet<F>,
    step: u64,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamSet<F>) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = F::from_f64(c.beta1).unwrap();
        let b2 = F::from_f64(c.beta2).unwrap();
        let one = F::one();
        let lr = F::from_f64(c.learning_rate / (1.0 - c.beta1.powi(t))).unwrap();
        let bc2 = F::from_f64(1.0 - c.beta2.powi(t)).unwrap();
        let eps = F::from_f64(c.eps).unwrap();
        for i in 0..params.len() {
            Zip::from(params.get_mut(i))
                .and(self.m.get_mut(i))
                .and(self.v.get_mut(i))
                .and(grads.get(i))
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= lr * *m / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}
