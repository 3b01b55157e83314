//! Named, shaped, seeded collection of trainable tensors with gradient slots.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::rng::{rand_normal, Rng};
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub trainable: bool,
}

/// Ordered map name -> (value, gradient, trainable). Iteration order is
/// insertion order, which makes checkpoints and the optimizer deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    entries: Vec<ParamEntry<S>>,
    pub seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            entries: Vec::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.names.push(name.to_string());
        self.entries.push(ParamEntry {
            value,
            grad,
            trainable,
        });
        Ok(())
    }

    /// Gaussian init from the substream keyed by the parameter name, so the
    /// draw is independent of registration order.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let mut rng = Rng::new(self.seed).substream(name);
        let t = rand_normal::<S>(&mut rng, shape).scale(S::from_f64(std));
        self.insert(name, t, true)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape), true)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: S) -> Result<()> {
        self.insert(name, Tensor::full(shape, v), true)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<S>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        Ok(&mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.grad)
    }

    /// Accumulate into a gradient slot. Gradients of frozen parameters are
    /// masked (silently dropped) so frozen weights can never drift.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<S>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let e = &mut self.entries[i];
        if !e.trainable {
            return Ok(());
        }
        if e.grad.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("{name}: {:?} vs {:?}", e.grad.shape(), g.shape()),
            });
        }
        e.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = Tensor::zeros(e.value.shape());
        }
    }

    /// Insertion-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.names
            .iter()
            .map(move |n| (n.as_str(), &self.entries[self.index[n]]))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn entry_mut(&mut self, idx: usize) -> (&str, &mut ParamEntry<S>) {
        (&self.names[idx], &mut self.entries[idx])
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.entries[i].trainable = false;
            }
        }
    }

    /// Cast every value/grad to another scalar type (file io boundary).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new(self.seed);
        for (name, e) in self.iter() {
            out.insert(name, e.value.cast::<T>(), e.trainable).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut ps = ParamStore::<f32>::new(1);
        ps.init_zeros("b", &[2]).unwrap();
        ps.init_zeros("a", &[2]).unwrap();
        ps.init_zeros("m", &[2]).unwrap();
        let names: Vec<_> = ps.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b", "a", "m"]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParamStore::<f32>::new(1);
        ps.init_zeros("w", &[2]).unwrap();
        assert!(ps.init_zeros("w", &[2]).is_err());
    }

    #[test]
    fn grad_shape_matches_value_shape() {
        let mut ps = ParamStore::<f64>::new(3);
        ps.init_normal("w", &[3, 4], 0.1).unwrap();
        let e = ps.get("w").unwrap();
        assert_eq!(e.value.shape(), e.grad.shape());
    }

    #[test]
    fn name_keyed_init_is_order_independent() {
        let mut a = ParamStore::<f64>::new(9);
        a.init_normal("x", &[4], 1.0).unwrap();
        a.init_normal("y", &[4], 1.0).unwrap();
        let mut b = ParamStore::<f64>::new(9);
        b.init_normal("y", &[4], 1.0).unwrap();
        b.init_normal("x", &[4], 1.0).unwrap();
        assert_eq!(a.value("x").unwrap().data(), b.value("x").unwrap().data());
        assert_eq!(a.value("y").unwrap().data(), b.value("y").unwrap().data());
    }

    #[test]
    fn frozen_params_drop_gradients() {
        let mut ps = ParamStore::<f32>::new(1);
        ps.init_const("le.w", &[2], 1.0).unwrap();
        ps.freeze_prefix("le.");
        ps.accumulate_grad("le.w", &Tensor::ones(&[2])).unwrap();
        assert_eq!(ps.grad("le.w").unwrap().data(), &[0.0, 0.0]);
    }
}
