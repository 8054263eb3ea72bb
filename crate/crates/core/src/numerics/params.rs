use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub gradient: Tensor,
}

/// Named parameter collection, ordered by registration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

/// Serialized form: name → tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot(pub BTreeMap<String, Tensor>);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names, which is a model wiring bug.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let gradient = Tensor::zeros(tensor.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            gradient,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].gradient
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].gradient
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.gradient.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot(
            self.params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
        )
    }

    /// Overwrites every parameter from a snapshot; names and shapes must match exactly.
    pub fn load_snapshot(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.0.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "snapshot has {} parameters, model has {}",
                snap.0.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let t = snap
                .0
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::dim("load_snapshot", p.tensor.shape(), t.shape()));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }
}
