use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, NumericsError, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
///
/// Values are reference counted so a graph can bind them as leaves without
/// copying. Updates go through [`ParamStore::value_mut`], which clones only
/// if a graph still holds the old value.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    /// Gaussian-initialized `rows x cols` parameter.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        let t = Tensor::new(rows, cols, data).expect("shape");
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces every value from `other`, requiring identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), NumericsError> {
        for id in self.ids() {
            let name = self.name(id).to_string();
            let src = other
                .id(&name)
                .ok_or_else(|| NumericsError::Shape(format!("missing parameter {name}")))?;
            if other.get(src).shape() != self.get(id).shape() {
                return Err(NumericsError::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    self.get(id).shape(),
                    other.get(src).shape()
                )));
            }
            self.values[id.0] = other.shared(src);
        }
        Ok(())
    }

    /// Binds every parameter as a gradient-tracking leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> ParamVars {
        ParamVars(
            self.values
                .iter()
                .map(|v| graph.leaf_shared(Arc::clone(v), true))
                .collect(),
        )
    }

    /// Binds every parameter as a constant (inference).
    pub fn bind_frozen(&self, graph: &mut Graph) -> ParamVars {
        ParamVars(
            self.values
                .iter()
                .map(|v| graph.leaf_shared(Arc::clone(v), false))
                .collect(),
        )
    }
}

/// Graph handles for one binding of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradients for every parameter after `graph.backward`, zero where the
    /// parameter did not influence the loss.
    pub fn grads(&self, graph: &Graph, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match graph.grad(self.var(id)) {
                Some(g) => g.clone(),
                None => {
                    let t = store.get(id);
                    Tensor::zeros(t.rows(), t.cols())
                }
            })
            .collect()
    }
}
