use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{AutodiffError, Shape, Tensor};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named collection of model tensors. Frozen entries take part in the forward
/// pass but never accumulate gradient.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    /// Replaces the value of `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<(), AutodiffError> {
        let entry = &mut self.entries[id.0];
        if entry.tensor.shape() != tensor.shape() {
            return Err(AutodiffError::ParamShape {
                name: entry.name.clone(),
                expected: entry.tensor.shape(),
                found: tensor.shape(),
            });
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn shape_table(&self) -> Vec<(String, Shape)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.shape()))
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

/// Gradient buffers laid out like a [`ParamStore`]; frozen entries stay zero.
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore {
            grads: store.entries.iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn is_zero(&self, id: ParamId) -> bool {
        self.grads[id.0].iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(
            self.grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>(),
        )
    }
}
