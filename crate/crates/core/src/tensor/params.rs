use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors and fixed buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a trainable tensor.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor.with_requires_grad(true))
    }

    /// Registers a tensor that is saved with the model but never trained.
    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor.with_requires_grad(false))
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Overwrites values from another store with the same layout.
    pub fn copy_values_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Version(
                "parameter layouts differ between stores".into(),
            ));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("copy_values_from", dst.shape(), src.shape()));
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = T::lit(s.as_f64());
            }
        }
        Ok(())
    }

    /// Same layout and values in another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Loads named tensors, requiring an exact match of names and shapes.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for (name, src) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Version(format!("unexpected tensor {name}")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != src.shape() {
                return Err(Error::Version(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = T::lit(s as f64);
            }
        }
        Ok(())
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }
}
