use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a named array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named arrays packed into one flat buffer.
///
/// Gradients and optimiser moments use the same layout, so they are plain
/// `Vec<f64>` of length [`ParamStore::len`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(specs: Vec<ParamSpec>, data: Vec<f64>) -> Result<Self> {
        let mut offset = 0;
        for s in &specs {
            if s.offset != offset {
                return Err(Error::Checkpoint(format!("parameter {} has offset {}, expected {offset}", s.name, s.offset)));
            }
            offset += s.len();
        }
        if offset != data.len() {
            return Err(Error::Checkpoint(format!(
                "parameter specs cover {offset} values but {} were stored",
                data.len()
            )));
        }
        Ok(ParamStore { specs, data })
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], mut init: impl FnMut() -> f64) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        let spec = ParamSpec {
            name,
            shape: shape.to_vec(),
            offset: self.data.len(),
        };
        self.data.extend((0..spec.len()).map(|_| init()));
        self.specs.push(spec);
        ParamId(self.specs.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[self.specs[id.0].range()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.specs[id.0].range();
        &mut self.data[r]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }
}

/// Slice of a flat gradient buffer belonging to `id`.
pub fn grad_slice<'a>(store: &ParamStore, grads: &'a mut [f64], id: ParamId) -> &'a mut [f64] {
    &mut grads[store.spec(id).range()]
}
