//! Named parameter storage shared by all networks.
//!
//! A `ParamSet` owns the trainable tensors of one network in registration
//! order; checkpointing walks the same order. For each forward pass the set is
//! interned into a fresh graph (`bind`), which is an `Arc` copy per tensor.

use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

/// Stable index of a parameter within its `ParamSet`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(pub(crate) usize);

impl PId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> PId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(true);
        PId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: PId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.tensors[i]),
            None => None,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.tensors.len()).map(PId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn is_trainable(&self, id: PId) -> bool {
        self.trainable[id.0]
    }

    /// Freeze or unfreeze the whole set. Frozen parameters are interned with
    /// `requires_grad = false`, so no gradient flows into them.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in &mut self.trainable {
            *t = trainable;
        }
    }

    /// Intern every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let ids = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| g.leaf(t.clone(), tr))
            .collect();
        Bound { ids }
    }

    /// Intern with gradients disabled regardless of trainability flags, for
    /// frozen networks inside someone else's training graph.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let ids = self.tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        Bound { ids }
    }

    /// In-place elementwise update used by optimizers: `f(param, pid)`.
    pub fn update_each(&mut self, mut f: impl FnMut(PId, &mut Tensor)) {
        for i in 0..self.tensors.len() {
            if self.trainable[i] {
                f(PId(i), &mut self.tensors[i]);
            }
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Node ids of one `ParamSet` interned into one graph.
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: PId) -> NodeId {
        self.ids[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.ids
    }

    /// Gradients for every parameter of the bound set, zeros for parameters
    /// off the loss path.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.ids.iter().map(|&id| g.grad(id)).collect()
    }
}
