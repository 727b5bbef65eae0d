use crate::error::{mismatch, Result};
use crate::tape::{Graph, ParamId, Var};
use crate::tensor::Tensor;

/// Ordered, named collection of learnable tensors. A parameter's index is its
/// [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.tensors.len()).map(ParamId).collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `graph`, returning the handles in id order.
    pub fn register(&self, graph: &mut Graph) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| graph.param(ParamId(i), t.clone()))
            .collect()
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(mismatch(
                "ParamSet::set",
                "parameter shape",
                format!("`{}`: {:?} vs {:?}", self.names[id.0], self.tensors[id.0].shape(), t.shape()),
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }
}
