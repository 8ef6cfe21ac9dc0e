//! Named parameter storage and the point-wise layers built on it.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::Var;
use crate::session::Session;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered mapping from parameter path strings to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces values from `other`, which must hold the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let id = self.id(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "assign_from",
                    lhs: dst.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *dst = t.clone();
        }
        if other.len() != self.len() {
            let missing = self.names.iter().find(|n| other.id(n).is_none()).cloned().unwrap_or_default();
            return Err(AutodiffError::UnknownParam(missing));
        }
        Ok(())
    }
}

/// Affine map `x · Wᵀ + b`, weight `out × in`, bias `out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `±sqrt(1/in_dim)`, zero bias.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let bound = (1.0 / in_dim.max(1) as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.add(format!("{prefix}.weight"), Tensor::new(vec![out_dim, in_dim], w)?)?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.linear(x, w, b)
    }

    /// Plain evaluation on one input row, outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        (0..self.out_dim)
            .map(|o| {
                let row = w.row(o);
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b.data()[o]
            })
            .collect()
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{prefix}.0"), in_dim, hidden, rng)?,
            second: Linear::new(store, &format!("{prefix}.1"), hidden, out_dim, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(s, x)?;
        let h = s.graph.relu(h)?;
        self.second.forward(s, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.first.apply(store, x).into_iter().map(|v| v.max(0.0)).collect();
        self.second.apply(store, &h)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.first.zero(store);
        self.second.zero(store);
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }
}
