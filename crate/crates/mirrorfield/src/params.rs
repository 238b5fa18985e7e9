//! Named parameter tensors with stable iteration order, plus the helpers
//! every trainable module shares: seeded initialization and tape binding.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Grads, Scalar, Tape, Tensor, Var};

/// Ordered name -> tensor map. Iteration follows insertion order, which makes
/// initialization draws, optimizer updates, and checkpoint layout all agree
/// on one canonical parameter sequence.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Re-expresses every tensor in another precision through f64.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::from_real_slice(t.shape(), &t.to_real_vec()));
        }
        out
    }
}

/// U(-bound, bound), drawn in row-major order.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_real(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data)
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn in row-major order.
pub fn uniform_fan_in<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Leaf vars for every parameter of a set, bound in iteration order so a
/// forward pass can look weights up by name.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn bind<T: Scalar>(tape: &Tape<T>, params: &ParamSet<T>) -> BoundParams {
        let mut vars = IndexMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.to_string(), tape.leaf(tensor.clone()));
        }
        BoundParams { vars }
    }

    /// Same lookup surface but nothing tracks gradients; forward-only passes
    /// (rendering, evaluation) go through this so they share the training
    /// kernels without paying for the backward bookkeeping.
    pub fn bind_const<T: Scalar>(tape: &Tape<T>, params: &ParamSet<T>) -> BoundParams {
        let mut vars = IndexMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.to_string(), tape.constant(tensor.clone()));
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects gradients per parameter name; parameters the loss never
    /// touched come back as zero tensors of the right shape.
    pub fn grads_by_name<T: Scalar>(
        &self,
        grads: &Grads<T>,
        params: &ParamSet<T>,
    ) -> IndexMap<String, Tensor<T>> {
        let mut out = IndexMap::new();
        for (name, var) in self.iter() {
            let g = match grads.get(var) {
                Some(t) => t.clone(),
                None => Tensor::zeros(params.get(name).shape()),
            };
            out.insert(name.to_string(), g);
        }
        out
    }
}
