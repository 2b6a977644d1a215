//! Named parameter registry.
//!
//! Layers and heads store [`ParamId`]s; the tensors themselves live in a
//! [`ParamSet`] so optimizers, checkpoints and pruning can treat the
//! whole model uniformly.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Regularization treatment of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularization {
    None,
    /// `lambda * (alpha * |w|_1 + (1 - alpha) * |w|_2^2)`; applied to
    /// steerable filter coefficients.
    ElasticNet,
    /// Plain weight decay.
    L2,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub reg: Regularization,
}

/// All trainable tensors of a model, addressed by unique name.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        reg: Regularization,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry {
            name,
            value,
            reg,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Uniform init on `[-bound, bound]`.
pub fn uniform_init<T: Scalar>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::fromf(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

/// Kaiming-style uniform init with bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform_init(rng, shape, (6.0 / fan_in.max(1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::zeros(vec![2, 2]), Regularization::None)
            .unwrap();
        assert!(ps.add("w", Tensor::zeros(vec![1]), Regularization::None).is_err());
        assert_eq!(ps.total_scalars(), 4);
        assert!(ps.id_of("w").is_some());
        assert!(ps.id_of("missing").is_none());
    }
}
