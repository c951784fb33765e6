use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::mat::Mat;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named array whose shape is fixed at creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    name: String,
    values: Mat,
    trainable: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// Owns every parameter of a model, addressable by id or unique name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
    #[serde(skip)]
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; panics on a duplicate name since that is a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, values: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, values, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].values
    }

    /// Mutable access to the raw values. Shape cannot change through a slice.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].values.as_mut_slice()
    }

    pub fn set_values(&mut self, id: ParamId, values: Mat) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.values.shape() != values.shape() {
            return Err(shape_err("set_values", p.values.shape(), values.shape()));
        }
        p.values = values;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Marks parameters as frozen. Gradients still flow through them; the
    /// optimizer just never writes to them.
    pub fn freeze(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.params[id.0].trainable = false;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.values.len()).sum()
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.by_name = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), ParamId(i))).collect();
    }

    /// Copies values (and trainable flags) from `other` for every name both stores share.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &other.params {
            if let Some(&id) = self.by_name.get(&p.name) {
                self.set_values(id, p.values.clone())?;
                self.params[id.0].trainable = p.trainable;
            }
        }
        Ok(())
    }
}
