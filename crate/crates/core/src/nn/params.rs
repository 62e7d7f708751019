use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::Ordering;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, ParamKey, Var, NEXT_STORE_ID};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Update schedule a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Trained from the first step.
    Base,
    /// Held at initialization until the delayed-update step (pyramid and atrous branches).
    Delayed,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub path: String,
    pub tensor: Tensor<T>,
    pub group: ParamGroup,
}

/// Flat, path-addressed collection of parameter tensors.
///
/// Initial values come from a random stream keyed by the parameter path, so a
/// parameter's start value does not depend on which other layers exist.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    id: u64,
    seed: u64,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore { id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed), seed, entries: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, path: &str, tensor: Tensor<T>, group: ParamGroup) -> Result<ParamId> {
        if self.find(path).is_some() {
            return Err(Error::invalid(format!("duplicate parameter path `{path}`")));
        }
        self.entries.push(ParamEntry { path: path.to_string(), tensor: tensor.with_requires_grad(true), group });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Uniform in `[-bound, bound]` from the path's own stream.
    pub fn add_uniform(&mut self, path: &str, shape: &[usize], bound: f64, group: ParamGroup) -> Result<ParamId> {
        let mut r = rng::stream(self.seed, path);
        let t = Tensor::from_fn(shape, |_| T::of(r.random_range(-bound..=bound)))?;
        self.add(path, t, group)
    }

    pub fn add_const(&mut self, path: &str, shape: &[usize], value: f64, group: ParamGroup) -> Result<ParamId> {
        self.add(path, Tensor::full(shape, T::of(value))?, group)
    }

    /// Standard-normal vector from the stream `path` (used for non-parameter state).
    pub fn normal_state(&self, path: &str, len: usize) -> Vec<T> {
        let mut r = rng::stream(self.seed, path);
        (0..len).map(|_| T::of(StandardNormal.sample(&mut r))).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.path == path).map(ParamId)
    }

    /// Total scalar count over all parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.id, index: id.0 }
    }

    /// Leaf for parameter `id`, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId, trainable: bool) -> Var {
        g.param(self.get(id), self.key(id), trainable)
    }

    /// Adds the gradients of every leaf of `g` bound to this store.
    pub fn accumulate(&mut self, g: &Graph<T>, grads: &Gradients<T>) -> Result<()> {
        for (v, key) in g.param_leaves() {
            if key.store != self.id {
                continue;
            }
            if let Some(d) = grads.wrt(v) {
                self.entries[key.index].tensor.accumulate_grad(d)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Concatenated values of the selected parameters.
    pub fn flat_values(&self, ids: &[ParamId]) -> Vec<T> {
        ids.iter().flat_map(|&id| self.get(id).values().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, ids: &[ParamId], flat: &[T]) {
        let mut off = 0;
        for &id in ids {
            let t = self.get_mut(id);
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Concatenated gradients (zeros where absent).
    pub fn flat_grads(&self, ids: &[ParamId]) -> Vec<T> {
        ids.iter()
            .flat_map(|&id| {
                let t = self.get(id);
                t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.len()])
            })
            .collect()
    }

    /// Hash of the exact bit patterns of every parameter in `group` (all when `None`).
    pub fn fingerprint(&self, group: Option<ParamGroup>) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.entries.iter().filter(|e| group.is_none_or(|g| e.group == g)) {
            e.path.hash(&mut h);
            for v in e.tensor.values() {
                v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_path_and_seed() {
        let mut a = ParamStore::<f64>::new(3);
        let mut b = ParamStore::<f64>::new(3);
        a.add_uniform("x", &[4], 1.0, ParamGroup::Base).unwrap();
        let ia = a.add_uniform("w", &[5], 0.5, ParamGroup::Base).unwrap();
        let ib = b.add_uniform("w", &[5], 0.5, ParamGroup::Base).unwrap();
        assert_eq!(a.get(ia).values(), b.get(ib).values());
        assert!(a.get(ia).values().iter().all(|v| v.abs() <= 0.5));
        assert!(a.add_const("w", &[1], 0.0, ParamGroup::Base).is_err());
    }

    #[test]
    fn accumulate_only_own_leaves() {
        let mut a = ParamStore::<f64>::new(1);
        let mut b = ParamStore::<f64>::new(1);
        let pa = a.add_const("p", &[2], 1.0, ParamGroup::Base).unwrap();
        let pb = b.add_const("p", &[2], 2.0, ParamGroup::Base).unwrap();
        let mut g = Graph::new();
        let va = a.bind(&mut g, pa, true);
        let vb = b.bind(&mut g, pb, true);
        let m = g.mul(va, vb).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        a.accumulate(&g, &grads).unwrap();
        assert_eq!(a.get(pa).grad().unwrap(), &[2.0, 2.0]);
        assert!(b.get(pb).grad().is_none());
    }
}
