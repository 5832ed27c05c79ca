//! Named parameter registry and gradient collections.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameter tensors.
///
/// Stored values are always representable in 32-bit floats so that
/// checkpoints (which persist `f32`) round-trip bitwise. Arithmetic on them
/// is carried out in `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        round_to_f32(&mut value);
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        round_to_f32(&mut value);
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

pub(crate) fn round_to_f32(t: &mut Tensor) {
    for x in t.data_mut() {
        *x = *x as f32 as f64;
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.random_range(-bound..bound);
    }
    t
}

/// Gradients keyed by parameter. Parameters outside the active computation
/// have no entry.
#[derive(Clone, Debug)]
pub struct Gradients {
    names: Vec<String>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn new(store: &ParamStore, grads: Vec<Option<Tensor>>) -> Self {
        debug_assert_eq!(grads.len(), store.len());
        Gradients {
            names: store.names.clone(),
            grads,
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        self.grads[i].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, Option<&Tensor>)> {
        self.names
            .iter()
            .zip(&self.grads)
            .enumerate()
            .map(|(i, (n, g))| (ParamId(i), n.as_str(), g.as_ref()))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Fails with the first parameter whose gradient is not finite.
    pub fn check_finite(&self) -> Result<()> {
        for (name, g) in self.names.iter().zip(&self.grads) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.register("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn values_are_f32_representable() {
        let mut s = ParamStore::new();
        let id = s
            .register("w", Tensor::from_vec(&[1], vec![0.1]).unwrap())
            .unwrap();
        let v = s.get(id).data()[0];
        assert_eq!(v, v as f32 as f64);
    }

    #[test]
    fn set_rejects_wrong_shape() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.set(id, Tensor::zeros(&[4])).is_err());
    }
}
