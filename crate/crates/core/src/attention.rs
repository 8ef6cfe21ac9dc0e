//! Dynamic feature-space graphs, edge convolution, and vector attention.
//!
//! For a query point `i` with neighborhood `X(i)`:
//!
//! ```text
//! σ_ij  = σ(p_i − p_j)                                   (3 → C, two layers)
//! w_ij  = ρ(β(φ(x_i) − ω(x_j) + σ_ij))                   per channel
//! y_i   = Σ_j w_ij ⊙ (α(x_j) + σ_ij)
//! out_i = x_i + y_i
//! ```
//!
//! `ρ` is a softmax over the neighborhood followed by an L1 renormalization,
//! both per channel. Neighbor selection is discrete and recorded on the
//! session's selection tape; gradients flow through gathered features only.

use std::sync::Arc;

use cdnet_autodiff::{Graph, Linear, Mlp2, ParamStore, Session, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;

use crate::cloud::Point3;
use crate::error::{Error, Result};
use crate::index::{knn_rows, SpatialIndex};

/// Per-layer KNN graph in feature space. Row `i` of `neighbors` lists `k`
/// point indices, the point itself first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DynamicGraph {
    pub layer: usize,
    pub k: usize,
    pub neighbors: Vec<usize>,
}

impl DynamicGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// Builds the graph over the rows of an `N × C` feature tensor: each point,
/// then its `k − 1` nearest other points by (distance, index); rows are padded
/// by repeating the last neighbor when `N < k`.
pub fn build_dynamic_graph(features: &Tensor, k: usize, layer: usize) -> DynamicGraph {
    assert!(k >= 1, "k must be positive");
    let n = features.rows();
    let c = features.row_len();
    let data = features.data();
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(k);
            row.push(i);
            if k > 1 && n > 1 {
                let others = knn_rows(data, c, features.row(i), k.min(n));
                row.extend(others.into_iter().filter(|&j| j != i).take(k - 1));
            }
            let last = *row.last().expect("self is present");
            row.resize(k, last);
            row
        })
        .collect();
    DynamicGraph {
        layer,
        k,
        neighbors: rows.concat(),
    }
}

/// DGCNN edge convolution: `h_ij = MLP([x_i, x_j − x_i])`, max over `j`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeConv {
    pub mlp: Mlp2,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl EdgeConv {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp2::new(store, prefix, 2 * in_dim, out_dim, out_dim, rng)?,
            in_dim,
            out_dim,
        })
    }

    /// Edges run from each row of `centers` to its `k` rows of `neighbors`;
    /// both index rows of `x`. Output is `centers.len() × out_dim`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, centers: &[usize], neighbors: &[usize], k: usize) -> Result<Var> {
        let m = centers.len();
        if neighbors.len() != m * k {
            return Err(Error::InvalidArgument(format!(
                "edge_conv: {} neighbor entries for {m} centers with k={k}",
                neighbors.len()
            )));
        }
        let rep: Arc<[usize]> = centers.iter().flat_map(|&c| std::iter::repeat(c).take(k)).collect();
        let xi = s.graph.gather(x, rep)?;
        let xj = s.graph.gather(x, neighbors.into())?;
        let diff = s.graph.sub(xj, xi)?;
        let e = s.graph.concat(&[xi, diff], 1)?;
        let h = self.mlp.forward(s, e)?;
        let h = s.graph.reshape(h, vec![m, k, self.out_dim])?;
        Ok(s.graph.max(h, 1)?)
    }
}

pub fn edge_conv(s: &mut Session<'_>, features: Var, graph: &DynamicGraph, p: &EdgeConv) -> Result<Var> {
    let centers: Vec<usize> = (0..graph.len()).collect();
    p.forward(s, features, &centers, &graph.neighbors, graph.k)
}

/// The learnable maps of one attention layer at width `C`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub phi: Linear,
    pub omega: Linear,
    pub alpha: Linear,
    pub beta: Mlp2,
    pub sigma: Mlp2,
    pub width: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            phi: Linear::new(store, &format!("{prefix}.phi"), width, width, rng)?,
            omega: Linear::new(store, &format!("{prefix}.omega"), width, width, rng)?,
            alpha: Linear::new(store, &format!("{prefix}.alpha"), width, width, rng)?,
            beta: Mlp2::new(store, &format!("{prefix}.beta"), width, width, width, rng)?,
            sigma: Mlp2::new(store, &format!("{prefix}.sigma"), 3, width, width, rng)?,
            width,
        })
    }

    /// Zeros α, β and σ, which turns the layer into the identity map.
    pub fn zero_residual_branch(&self, store: &mut ParamStore) {
        self.alpha.zero(store);
        self.beta.zero(store);
        self.sigma.zero(store);
    }
}

/// Position encoding of one coordinate pair, `σ(p_i − p_j)`.
pub fn position_encoding(store: &ParamStore, p: &AttentionParams, ci: &Point3, cj: &Point3) -> Vec<f64> {
    let rel = [ci[0] - cj[0], ci[1] - cj[1], ci[2] - cj[2]];
    p.sigma.apply(store, &rel)
}

/// ρ applied to a `k × C` logit block: per-column softmax, then L1 renormalization.
pub fn attention_normalize(logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let w = normalize(&mut g, x, 0)?;
    Ok(g.value(w).clone())
}

fn normalize(g: &mut Graph, logits: Var, axis: usize) -> Result<Var> {
    let w = g.softmax(logits, axis)?;
    Ok(g.l1_normalize(w, axis)?)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `N_q × C`, residual included.
    pub output: Var,
    /// `N_q × k × C` post-ρ weights.
    pub weights: Var,
}

/// Vector attention of each query row over `k` key rows per query.
#[allow(clippy::too_many_arguments)]
pub fn vector_attention(
    s: &mut Session<'_>,
    p: &AttentionParams,
    query_feats: Var,
    query_coords: &[Point3],
    key_feats: Var,
    key_coords: &[Point3],
    neighbors: &[usize],
    k: usize,
) -> Result<AttentionOutput> {
    let nq = query_coords.len();
    let c = p.width;
    if s.graph.shape(query_feats) != [nq, c] || s.graph.shape(key_feats) != [key_coords.len(), c] {
        return Err(Error::InvalidArgument(format!(
            "attention: query {:?} / keys {:?} do not match {nq}/{} points of width {c}",
            s.graph.shape(query_feats),
            s.graph.shape(key_feats),
            key_coords.len()
        )));
    }
    if neighbors.len() != nq * k {
        return Err(Error::InvalidArgument(format!(
            "attention: {} neighbor entries for {nq} queries with k={k}",
            neighbors.len()
        )));
    }
    let rep: Arc<[usize]> = (0..nq).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let nbr: Arc<[usize]> = neighbors.into();

    let mut rel = Vec::with_capacity(nq * k * 3);
    for (slot, &j) in nbr.iter().enumerate() {
        let (a, b) = (&query_coords[slot / k], &key_coords[j]);
        rel.extend_from_slice(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
    }
    let rel = s.constant(Tensor::new(vec![nq * k, 3], rel)?);
    let pe = p.sigma.forward(s, rel)?;

    let q = p.phi.forward(s, query_feats)?;
    let kf = p.omega.forward(s, key_feats)?;
    let v = p.alpha.forward(s, key_feats)?;
    let qg = s.graph.gather(q, rep)?;
    let kg = s.graph.gather(kf, nbr.clone())?;
    let vg = s.graph.gather(v, nbr)?;

    let rel_feat = s.graph.sub(qg, kg)?;
    let rel_feat = s.graph.add(rel_feat, pe)?;
    let logits = p.beta.forward(s, rel_feat)?;
    let logits = s.graph.reshape(logits, vec![nq, k, c])?;
    let weights = normalize(&mut s.graph, logits, 1)?;

    let vals = s.graph.add(vg, pe)?;
    let vals = s.graph.reshape(vals, vec![nq, k, c])?;
    let weighted = s.graph.mul(weights, vals)?;
    let y = s.graph.sum(weighted, 1)?;
    let output = s.graph.add(query_feats, y)?;
    Ok(AttentionOutput { output, weights })
}

/// Where a self-attention layer looks for neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborSpace {
    /// Dynamic graph over the current features.
    Feature,
    /// KNN over 3D coordinates.
    Coordinate,
}

/// Self-transformer over a freshly built dynamic graph.
pub fn self_transformer_layer(
    s: &mut Session<'_>,
    features: Var,
    coords: &[Point3],
    k: usize,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    self_transformer_layer_in(s, NeighborSpace::Feature, features, coords, k, p)
}

pub fn self_transformer_layer_in(
    s: &mut Session<'_>,
    space: NeighborSpace,
    features: Var,
    coords: &[Point3],
    k: usize,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    if coords.is_empty() {
        return Err(Error::EmptyCloud("self-transformer input".into()));
    }
    let neighbors = match space {
        NeighborSpace::Feature => s.select(|g| build_dynamic_graph(g.value(features), k, 0).neighbors)?,
        NeighborSpace::Coordinate => {
            let index = SpatialIndex::from_points("self", coords.to_vec())?;
            s.select(|_| index.knn_indices(coords, k))?
        }
    };
    vector_attention(s, p, features, coords, features, coords, &neighbors, k)
}

/// Cross-transformer: queries from cloud A attend over the `k` nearest
/// points of cloud B in coordinate space. Residual on A.
#[allow(clippy::too_many_arguments)]
pub fn cross_transformer_layer(
    s: &mut Session<'_>,
    feat_a: Var,
    coords_a: &[Point3],
    feat_b: Var,
    coords_b: &[Point3],
    k: usize,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    if coords_a.is_empty() || coords_b.is_empty() {
        return Err(Error::EmptyCloud("cross-transformer needs both clouds non-empty".into()));
    }
    let index = SpatialIndex::from_points("cross", coords_b.to_vec())?;
    let neighbors = s.select(|_| index.knn_indices(coords_a, k))?;
    vector_attention(s, p, feat_a, coords_a, feat_b, coords_b, &neighbors, k)
}
