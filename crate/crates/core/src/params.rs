use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) with resampling outside +-2 std.
    TruncNormal { std: f64 },
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let v: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * std;
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Handle to one named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub(crate) struct ParamEntry<T> {
    pub name: String,
    pub data: Vec<T>,
    pub shape: Shape,
    // AdamW first/second moment state.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Ordered, named collection of trainable tensors. Registration order is
/// the binding order, which keeps runs bitwise reproducible.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let numel = shape.numel();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::ZERO; numel],
            Init::Ones => vec![T::ONE; numel],
            Init::TruncNormal { std } => (0..numel)
                .map(|_| T::from_f64(trunc_normal(rng, std)))
                .collect(),
        };
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            data,
            shape,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total count of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.shape.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.entries[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub(crate) fn entry(&self, id: ParamId) -> (&str, &[T], Shape) {
        let e = &self.entries[id.0];
        (&e.name, &e.data, e.shape)
    }

    pub(crate) fn iter_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Register every parameter on a fresh graph as a gradient leaf, in
    /// registration order. Parameter data is snapshotted into the graph;
    /// the store stays untouched until the optimizer writes back.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<ParamBinding> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            tensors.push(g.leaf(e.data.clone(), e.shape)?);
        }
        Ok(ParamBinding { tensors })
    }
}

/// Graph tensors for one forward pass, indexed by [`ParamId`].
pub struct ParamBinding {
    tensors: Vec<Tensor>,
}

impl ParamBinding {
    pub fn get(&self, id: ParamId) -> Tensor {
        self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// AdamW with decoupled weight decay: the decay shrink is applied to the
/// parameter separately from the Adam moment update.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter in the store. Gradients are read
    /// from the graph leaves bound for this step; a missing gradient means
    /// a parameter was disconnected from the loss, which is a wiring bug.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        graph: &Graph<T>,
        binding: &ParamBinding,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in store.entries.iter_mut().enumerate() {
            let t = binding.tensors[i];
            let grad = graph.grad(t).ok_or_else(|| {
                Error::config(format!("parameter {} received no gradient", e.name))
            })?;
            if grad.len() != e.data.len() {
                return Err(Error::DimMismatch {
                    op: "adamw_step",
                    axis: "numel",
                    expected: e.data.len(),
                    got: grad.len(),
                });
            }
            for j in 0..e.data.len() {
                let g = grad[j].to_f64();
                let mut p = e.data[j].to_f64();
                // decoupled decay first, then the Adam direction
                p -= self.lr * self.weight_decay * p;
                e.m[j] = self.beta1 * e.m[j] + (1.0 - self.beta1) * g;
                e.v[j] = self.beta2 * e.v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = e.m[j] / bc1;
                let v_hat = e.v[j] / bc2;
                p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                e.data[j] = T::from_f64(p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with_one(data: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        let n = data.len();
        let id = store
            .register("p", Shape::new(1, 1, 1, n), Init::Zeros, &mut rng)
            .unwrap();
        store.data_mut(id).copy_from_slice(&data);
        (store, id)
    }

    /// Step with an explicit gradient wired through a trivial graph.
    fn step_once(store: &mut ParamStore<f64>, opt: &mut AdamW, grad: &[f64]) {
        let mut g: Graph<f64> = Graph::new();
        let binding = store.bind(&mut g).unwrap();
        let p = binding.get(ParamId(0));
        let gc = g.constant(grad.to_vec(), p.shape()).unwrap();
        let prod = g.mul(p, gc).unwrap();
        let loss = g.sum_all(prod).unwrap();
        g.backward(loss).unwrap();
        opt.step(store, &g, &binding).unwrap();
    }

    #[test]
    fn zero_grad_no_decay_leaves_params_unchanged() {
        let (mut store, id) = store_with_one(vec![0.3, -1.2, 4.0]);
        let mut opt = AdamW::new(1e-2, 0.0);
        step_once(&mut store, &mut opt, &[0.0, 0.0, 0.0]);
        assert_eq!(store.data(id), &[0.3, -1.2, 4.0]);
    }

    #[test]
    fn single_step_matches_hand_trace() {
        // From m=v=0, one step with grad g moves theta by
        // -lr * g / (|g| + eps) after bias correction.
        let g = 0.37;
        let (mut store, id) = store_with_one(vec![1.0]);
        let lr = 1e-3;
        let mut opt = AdamW::new(lr, 0.0);
        step_once(&mut store, &mut opt, &[g]);
        let expected = 1.0 - lr * g / (g.abs() + opt.eps);
        assert!((store.data(id)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn decay_with_zero_grad_shrinks_by_factor() {
        let (mut store, id) = store_with_one(vec![2.0, -0.5]);
        let (lr, wd) = (1e-2, 0.1);
        let mut opt = AdamW::new(lr, wd);
        step_once(&mut store, &mut opt, &[0.0, 0.0]);
        let f = 1.0 - lr * wd;
        assert!((store.data(id)[0] - 2.0 * f).abs() < 1e-15);
        assert!((store.data(id)[1] - -0.5 * f).abs() < 1e-15);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("w", Shape::scalar(), Init::Zeros, &mut rng).unwrap();
        assert!(store.register("w", Shape::scalar(), Init::Zeros, &mut rng).is_err());
    }
}
