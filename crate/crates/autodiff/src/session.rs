//! A forward pass: one graph, lazily bound parameters, and a tape of
//! discrete selections (neighbor lists, samples) that can be replayed.

use crate::error::{AutodiffError, Result};
use crate::graph::{Gradients, Graph, Precision, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Recorded outcomes of non-differentiable index selections.
#[derive(Clone, Debug, Default)]
pub struct SelectionTape {
    entries: Vec<Vec<usize>>,
    cursor: usize,
    replay: bool,
}

impl SelectionTape {
    pub fn recording() -> Self {
        Self::default()
    }

    /// Rewinds a recorded tape so a later pass reuses every selection in order.
    pub fn into_replay(mut self) -> Self {
        self.cursor = 0;
        self.replay = true;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn next(&mut self, compute: impl FnOnce() -> Vec<usize>) -> Result<Vec<usize>> {
        if self.replay {
            let e = self.entries.get(self.cursor).cloned().ok_or(AutodiffError::SelectionTape(self.cursor))?;
            self.cursor += 1;
            Ok(e)
        } else {
            let e = compute();
            self.entries.push(e.clone());
            Ok(e)
        }
    }
}

pub struct Session<'p> {
    pub graph: Graph,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    tape: SelectionTape,
    trainable: bool,
}

impl<'p> Session<'p> {
    /// A session whose parameters are differentiable leaves.
    pub fn new(store: &'p ParamStore) -> Self {
        Self::build(store, Precision::F64, true, SelectionTape::recording())
    }

    /// A session whose parameters enter as constants.
    pub fn inference(store: &'p ParamStore, precision: Precision) -> Self {
        Self::build(store, precision, false, SelectionTape::recording())
    }

    pub fn with_tape(store: &'p ParamStore, tape: SelectionTape) -> Self {
        Self::build(store, Precision::F64, true, tape)
    }

    fn build(store: &'p ParamStore, precision: Precision, trainable: bool, tape: SelectionTape) -> Self {
        Self {
            graph: Graph::with_precision(precision),
            store,
            bound: vec![None; store.len()],
            tape,
            trainable,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// The graph node for a parameter; bound once per session so every use
    /// shares one leaf and its gradient accumulates.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Runs `compute` when recording, or returns the next recorded selection when replaying.
    pub fn select(&mut self, compute: impl FnOnce(&Graph) -> Vec<usize>) -> Result<Vec<usize>> {
        let graph = &self.graph;
        self.tape.next(|| compute(graph))
    }

    pub fn into_tape(self) -> SelectionTape {
        self.tape
    }

    /// Backward from `loss`; returns one gradient per parameter in store
    /// order, zero for parameters the loss does not reach.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor>> {
        let mut grads: Gradients = self.graph.backward(loss)?;
        Ok(self
            .store
            .ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => grads.take(v).unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape())),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect())
    }
}
