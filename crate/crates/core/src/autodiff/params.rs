use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Gradients, Shape};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    name: String,
    shape: Shape,
    value: Arc<Vec<T>>,
    grad: Vec<T>,
}

impl<T: Real> ParamEntry<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Vec<T>> {
        self.value.clone()
    }

    /// Copy-on-write access; graphs still holding the old buffer keep it.
    pub fn value_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.value).as_mut_slice()
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut [T], &[T]) {
        (Arc::make_mut(&mut self.value).as_mut_slice(), &self.grad)
    }
}

/// Named trainable parameters, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: Shape, value: Vec<T>) -> Result<ParamId> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape(format!("parameter {name}: {shape:?} vs {} values", value.len())));
        }
        if self.find(name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let n = value.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            value: Arc::new(value),
            grad: vec![T::zero(); n],
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Weight drawn from `N(0, std)`.
    pub fn add_normal(&mut self, name: &str, shape: Shape, std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let n = shape.iter().product();
        let v = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        self.add(name, shape, v)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Shape) -> Result<ParamId> {
        self.add(name, shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|id| self.entries[id.0].name.starts_with(prefix)).collect()
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let e = &mut self.entries[id.0];
            e.grad.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn zero_grad_of(&mut self, id: ParamId) {
        self.entries[id.0].grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn add_to_grad(&mut self, id: ParamId, g: &[T]) {
        self.entries[id.0].grad.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
    }

    pub fn set_value(&mut self, id: ParamId, v: &[T]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if v.len() != e.len() {
            return Err(Error::shape(format!("parameter {}: {} vs {} values", e.name, e.len(), v.len())));
        }
        e.value_mut().copy_from_slice(v);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape,
                    value: Arc::new(e.value.iter().map(|v| U::of(v.f64())).collect()),
                    grad: vec![U::zero(); e.len()],
                })
                .collect(),
        }
    }
}
