//! Named parameter storage shared by the three networks.
//!
//! Values live outside any tape; a forward pass binds them as leaves and an
//! optimizer step writes updated values back. Creation order is stable, so
//! iteration is deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::TensorValue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: TensorValue,
    /// Fittable parameters receive gradients; running statistics do not.
    pub fittable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: TensorValue, fittable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, fittable });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &TensorValue {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: TensorValue) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {}: shape {:?} cannot be replaced by {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn is_fittable(&self, id: ParamId) -> bool {
        self.entries[id.0].fittable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn fittable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.fittable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn total_fittable_scalars(&self) -> usize {
        self.iter()
            .filter(|(_, e)| e.fittable)
            .map(|(_, e)| e.value.numel())
            .sum()
    }
}
