//! Named parameter storage, initialisation, and binding onto a [`Tape`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Flat map from dotted names (`adapter.basecolor.cab0.q.normal.w`) to
/// tensors, plus the set of names excluded from training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), frozen: BTreeSet::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for k in self.tensors.keys() {
            if k.starts_with(prefix) {
                self.frozen.insert(k.clone());
            }
        }
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        self.frozen.retain(|k| !k.starts_with(prefix));
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|k| !self.frozen.contains(*k)).cloned().collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.frozen.iter().cloned().collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Copies every tensor under `from` to the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> usize {
        let copies: Vec<(String, Tensor<T>)> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), v.clone()))
            })
            .collect();
        let n = copies.len();
        for (k, v) in copies {
            if let Some(dst) = self.tensors.get_mut(&k) {
                if dst.shape() == v.shape() {
                    *dst = v;
                }
            }
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }
}

/// Seeded initialiser for parameter tensors.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::c(self.rng.gen_range(-bound..=bound))).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    /// Uniform in `±1/√fan_in`.
    pub fn fan_in<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    /// Truncated-ish normal via the sum of uniforms, for bias tables.
    pub fn small<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let s: f64 = (0..4).map(|_| self.rng.gen_range(-1.0..1.0)).sum();
                T::c((s * std * (3.0f64 / 4.0).sqrt()).clamp(-2.0 * std, 2.0 * std))
            })
            .collect();
        Tensor::from_vec(shape, data).expect("shape")
    }
}

/// A [`Tape`] with lazily bound parameters. Trainable parameters become
/// gradient-carrying leaves; frozen ones (or all, in inference mode) become
/// constants.
pub struct Graph<'p, T> {
    tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: HashMap<String, Var>,
    train: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { tape: Tape::new(), params, bound: HashMap::new(), train: true }
    }

    /// Graph in which no parameter carries a gradient.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Self { tape: Tape::new(), params, bound: HashMap::new(), train: false }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let grad = self.train && !self.params.is_frozen(name);
        let v = self.tape.leaf(t, grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of `loss` for every bound trainable parameter.
    pub fn param_grads(&self, loss: Var) -> BTreeMap<String, Tensor<T>> {
        let mut g = self.tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(t) = g.take(v) {
                out.insert(name.clone(), t);
            }
        }
        out
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
