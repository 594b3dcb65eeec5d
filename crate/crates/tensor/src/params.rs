//! Named parameter storage shared by model modules, the optimizer and
//! checkpoints.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Trainable entries carry
/// `requires_grad = true`; buffers such as batch-norm running statistics do
/// not.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(trainable));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensors[id.0].requires_grad
    }

    /// Total number of trainable scalars.
    pub fn trainable_numel(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad)
            .map(Tensor::numel)
            .sum()
    }

    /// Replaces a tensor's values, keeping its shape and trainability.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != values.len() {
            return Err(TensorError::ParamShape {
                name: self.names[id.0].clone(),
                expected: t.shape().to_vec(),
                found: vec![values.len()],
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Clears accumulated gradients and sets them to zero for trainable
    /// entries.
    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = t.requires_grad.then(|| vec![0.0; t.numel()]);
        }
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds `scale · grads` into the stored gradient buffers.
    pub fn accumulate_grads(&mut self, grads: &ParamGrads, scale: f64) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.0) {
            let Some(g) = g else { continue };
            if !t.requires_grad {
                continue;
            }
            let buf = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, v) in buf.iter_mut().zip(g) {
                *b += scale * v;
            }
        }
    }

    /// Copies every tensor whose name also exists in `other`, checking
    /// shapes. Names present in only one store are reported as errors.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if let Some(extra) = other.names.iter().find(|n| !self.by_name.contains_key(*n)) {
            return Err(TensorError::UnknownParam(extra.clone()));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other.by_name(name)?;
            let dst = &mut self.tensors[i];
            if src.shape() != dst.shape() {
                return Err(TensorError::ParamShape {
                    name: name.clone(),
                    expected: dst.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Flat copy of all trainable values in registration order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad)
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

/// Gradients produced by one backward pass, indexed like the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads(pub(crate) Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn empty(len: usize) -> Self {
        Self(vec![None; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(m) => m.iter_mut().zip(theirs).for_each(|(a, b)| *a += b),
                None => *mine = Some(theirs.clone()),
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
