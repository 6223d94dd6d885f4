//! Named parameter store, initializers, and the Adam optimizer with
//! decoupled weight decay.

use crate::graph::{Arr, El, Graph, Gradients, Var};
use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Flat collection of named parameter tensors. Stored in f64 so checkpoints
/// are precision-independent; cast to the training element type per step.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Truncated normal (resampled beyond 2 sigma), scaled by `std`.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> ArrayD<f64> {
    Array2::from_shape_fn((rows, cols), |_| trunc_normal(rng, std)).into_dyn()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(shape)
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(shape)
}

/// Leaf handles for every parameter of a store, inserted into one graph.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn bind<F: El>(g: &mut Graph<F>, store: &ParamStore) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in store.iter() {
            let cast: Arr<F> = value.mapv(F::cast_f64);
            vars.insert(name.to_string(), g.leaf(cast));
        }
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect gradients back into an f64 store keyed like the parameters.
    pub fn grads<F: El>(&self, grads: &Gradients<F>) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(*var) {
                out.insert(
                    name.clone(),
                    g.mapv(El::to_f64).as_standard_layout().to_owned(),
                );
            }
        }
        out
    }
}

/// Adam with decoupled weight decay (weight decay is not applied to biases,
/// norm scales, or embedding-like 1-d parameters).
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
    pub t: usize,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            m.zip_mut_with(grad, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(grad, |vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi
            });
            let decay = if p.ndim() >= 2 { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mh = mi / bc1;
                    let vh = vi / bc2;
                    *pi -= lr * (mh / (vh.sqrt() + self.eps) + decay * *pi);
                });
        }
    }
}

/// Clip gradients to a maximum global L2 norm; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, ArrayD<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}
