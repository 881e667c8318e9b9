//! Named parameter storage with freeze support.
//!
//! Parameters keep a stable construction order; the freeze policy and the
//! checkpoint format both rely on it.

use super::scalar::Scalar;
use super::{Tensor, TensorError, TensorResult};
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One learnable tensor. Frozen (`trainable = false`) parameters still
/// receive gradients but must never be updated by an optimizer.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a tensor under a unique dotted path.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> TensorResult<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(TensorError::Usage(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name,
            tensor: tensor.with_grad(),
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Clone of every parameter value, in store order.
    pub fn snapshot(&self) -> Vec<Vec<S>> {
        self.params.iter().map(|p| p.tensor.data().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<S>]) -> TensorResult<()> {
        if snapshot.len() != self.params.len() {
            return Err(TensorError::Usage(format!(
                "snapshot has {} entries, store has {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for (p, values) in self.params.iter_mut().zip(snapshot) {
            if values.len() != p.tensor.numel() {
                return Err(TensorError::DataLength {
                    expected: p.tensor.numel(),
                    got: values.len(),
                });
            }
            p.tensor.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    /// Check that the given groups partition exactly the trainable parameters.
    pub fn validate_partition(&self, groups: &[&[ParamId]]) -> TensorResult<()> {
        let mut seen = HashSet::new();
        for group in groups {
            for id in *group {
                if !seen.insert(*id) {
                    return Err(TensorError::Usage(format!(
                        "parameter {:?} appears in more than one group",
                        self.get(*id).name
                    )));
                }
                if !self.get(*id).trainable {
                    return Err(TensorError::Usage(format!(
                        "frozen parameter {:?} placed in an optimizer group",
                        self.get(*id).name
                    )));
                }
            }
        }
        for (id, p) in self.iter() {
            if p.trainable && !seen.contains(&id) {
                return Err(TensorError::Usage(format!(
                    "trainable parameter {:?} missing from all groups",
                    p.name
                )));
            }
        }
        Ok(())
    }
}
