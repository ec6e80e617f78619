//! Named tensor storage shared by parameters, gradients, and moments.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::ModelError;

/// All model arrays are 64-bit; shapes are dynamic because the store
/// mixes 1-d (biases, norm stats), 2-d, and 3-d (conv weight) tensors.
pub type Tensor = ArrayD<f64>;

/// An ordered map from tensor name to tensor. Iteration order is the
/// sorted name order, which every serialization and update loop relies
/// on for reproducibility.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: BTreeMap<String, Tensor>,
}

/// Model parameters, including batch-norm running statistics (which are
/// buffers, not learnable scalars; see [`TensorStore::is_buffer`]).
pub type ParameterStore = TensorStore;

/// Gradients, in key/shape bijection with the parameter store. Buffer
/// entries are present but always zero.
pub type GradientStore = TensorStore;

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// True for names that hold state updated outside backpropagation:
    /// batch-norm running statistics and batch counters.
    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(".running_mean")
            || name.ends_with(".running_var")
            || name.ends_with(".num_batches")
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.entries
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Verifies a key/shape bijection with `other`.
    pub fn same_layout(&self, other: &TensorStore) -> Result<(), ModelError> {
        for (name, tensor) in &self.entries {
            let theirs = other.get(name)?;
            if theirs.shape() != tensor.shape() {
                return Err(ModelError::ShapeMismatch {
                    context: name.clone(),
                    expected: tensor.shape().to_vec(),
                    got: theirs.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(ModelError::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }

    /// A store with the same keys and shapes, all zeros.
    pub fn zeros_like(&self) -> TensorStore {
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.raw_dim())))
            .collect();
        TensorStore { entries }
    }

    /// Total scalars held, optionally counting only learnable tensors.
    pub fn scalar_count(&self, learnable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|(name, _)| !learnable_only || !Self::is_buffer(name))
            .map(|(_, t)| t.len())
            .sum()
    }
}
