use std::collections::HashMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use super::NumError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameter tensors with a per-parameter trainable flag.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), NumError> {
        let param = &mut self.params[id.0];
        if param.value.shape() != value.shape() {
            return Err(NumError::Shape(format!(
                "parameter {} is {:?}, replacement is {:?}",
                param.name,
                param.value.shape(),
                value.shape()
            )));
        }
        param.value = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Total element count over the given parameters.
    pub fn element_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }
}

/// One forward/backward pass: a fresh [`Graph`] with parameters bound lazily.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
    track_grad: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: HashMap::new(), track_grad: true }
    }

    /// A session that records no gradient requirements, for decoding.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self { track_grad: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph node for a parameter, inserted on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let rg = self.track_grad && self.store.is_trainable(id);
        let v = self.graph.leaf(self.store.get(id).clone(), rg);
        self.bound.insert(id, v);
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    /// Runs backward from `loss` and returns gradients for the trainable
    /// parameters that took part in the computation. Parameters that were
    /// never bound, or that the loss does not reach, are left out so the
    /// optimizer skips them entirely.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>, NumError> {
        let mut grads: Gradients = self.graph.backward(loss)?;
        let mut bound: Vec<(ParamId, Var)> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        bound.sort();
        Ok(bound
            .into_iter()
            .filter(|(id, _)| self.store.is_trainable(*id))
            .filter_map(|(id, v)| grads.take(v).map(|g| (id, g)))
            .collect())
    }
}
