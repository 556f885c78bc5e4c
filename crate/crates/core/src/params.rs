//! Named parameter storage and the Adam optimizer.
//!
//! Models register their tensors in a [`ParamStore`] and keep plain `usize`
//! handles. Each training step turns every parameter into a graph leaf,
//! runs forward/backward, and feeds the collected gradients to [`Adam`].

use crate::graph::{Arr, Graph, NodeId};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn register(&mut self, name: &str, value: Arr) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Zero-mean uniform init with half-width `1/sqrt(scale_dim)`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        scale_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let half_width = 1.0 / (scale_dim as f64).sqrt();
        let v = Arr::from_shape_fn(IxDyn(shape), |_| (rng.gen::<f64>() * 2.0 - 1.0) * half_width);
        self.register(name, v)
    }

    pub fn register_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.register(name, Arr::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Arr {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Arr {
        &mut self.values[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Insert every parameter as a leaf of `graph`, aligned with store indices.
    pub fn leaves(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.values.iter().map(|v| graph.leaf(v.clone())).collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.values.iter().map(|p| Arr::zeros(p.raw_dim())).collect();
        let v = store.values.iter().map(|p| Arr::zeros(p.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One update. `grads[i]` may be `None` when a parameter did not
    /// participate in the loss (e.g. unused embedding rows get no update).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Arr>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.values[i];
            let (ms, vs, ps, gs) = (
                m.as_slice_mut().unwrap(),
                v.as_slice_mut().unwrap(),
                p.as_slice_mut().unwrap(),
                g.as_slice().unwrap(),
            );
            for j in 0..gs.len() {
                ms[j] = self.beta1 * ms[j] + (1.0 - self.beta1) * gs[j];
                vs[j] = self.beta2 * vs[j] + (1.0 - self.beta2) * gs[j] * gs[j];
                let mhat = ms[j] / bc1;
                let vhat = vs[j] / bc2;
                ps[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
