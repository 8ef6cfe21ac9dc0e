//! Exact k-nearest-neighbor search over 3D points.
//!
//! Results are ordered by (squared distance, point index), so ties resolve to
//! the lower index and the output equals a brute-force scan exactly. When a
//! cloud has fewer than `k` points the last neighbor is repeated up to `k`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::cloud::{LabeledPointCloud, Point3};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborList {
    pub indices: Vec<usize>,
    /// Squared Euclidean distances, non-decreasing.
    pub sq_dists: Vec<f64>,
}

#[inline]
pub fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Copy, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d.total_cmp(&other.d).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Immutable k-d tree over one cloud's coordinates.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    pub source_id: String,
    points: Vec<Point3>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(cloud: &LabeledPointCloud) -> Result<Self> {
        Self::from_points(&cloud.id, cloud.points().to_vec())
    }

    pub fn from_points(source_id: &str, points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud(format!("cannot index `{source_id}`")));
        }
        let mut perm: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        build_node(&points, &mut perm, 0, points.len(), &mut nodes);
        Ok(Self {
            source_id: source_id.to_string(),
            points,
            perm,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn knn(&self, q: &Point3, k: usize) -> NeighborList {
        assert!(k >= 1, "k must be positive");
        let kk = k.min(self.points.len());
        let mut heap = BinaryHeap::with_capacity(kk + 1);
        self.search(0, q, kk, &mut heap);
        let mut found = heap.into_sorted_vec();
        let last = *found.last().expect("index is non-empty");
        found.resize(k, last);
        NeighborList {
            indices: found.iter().map(|c| c.idx).collect(),
            sq_dists: found.iter().map(|c| c.d).collect(),
        }
    }

    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let n = self.knn(q, 1);
        (n.indices[0], n.sq_dists[0])
    }

    /// Queries in parallel; output order follows `queries`.
    pub fn knn_batch(&self, queries: &[Point3], k: usize) -> Vec<NeighborList> {
        queries.par_iter().map(|q| self.knn(q, k)).collect()
    }

    /// Neighbor indices of every query, flattened row-major (`queries.len() × k`).
    pub fn knn_indices(&self, queries: &[Point3], k: usize) -> Vec<usize> {
        self.knn_batch(queries, k).into_iter().flat_map(|n| n.indices).collect()
    }

    /// All points with squared distance ≤ `r2`, ordered by (distance, index).
    pub fn within(&self, q: &Point3, r2: f64) -> Vec<usize> {
        let mut out: Vec<Candidate> = Vec::new();
        self.collect_within(0, q, r2, &mut out);
        out.sort_unstable();
        out.into_iter().map(|c| c.idx).collect()
    }

    fn collect_within(&self, node: usize, q: &Point3, r2: f64, out: &mut Vec<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    let d = sq_dist(q, &self.points[i]);
                    if d <= r2 {
                        out.push(Candidate { d, idx: i });
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.collect_within(near, q, r2, out);
                if diff * diff <= r2 {
                    self.collect_within(far, q, r2, out);
                }
            }
        }
    }

    fn search(&self, node: usize, q: &Point3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    let c = Candidate {
                        d: sq_dist(q, &self.points[i]),
                        idx: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // equal plane distance must still be explored: a tied point with a lower index may sit there
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").d {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

fn build_node(points: &[Point3], perm: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut perm[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        for d in 0..3 {
            lo[d] = lo[d].min(points[i][d]);
            hi[d] = hi[d].max(points[i][d]);
        }
    }
    let dim = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][dim].total_cmp(&points[b][dim]).then(a.cmp(&b)));
    let value = points[slice[mid]][dim];
    nodes.push(Node::Leaf { start, end });
    let left = build_node(points, perm, start, start + mid, nodes);
    let right = build_node(points, perm, start + mid, end, nodes);
    nodes[id] = Node::Split { dim, value, left, right };
    id
}

/// k nearest rows of `data` (row-major, `dim` columns) to `query` in
/// Euclidean distance, ordered by (distance, index), clamped with repetition.
pub fn knn_rows(data: &[f64], dim: usize, query: &[f64], k: usize) -> Vec<usize> {
    let n = data.len() / dim.max(1);
    assert!(n > 0 && k >= 1);
    let mut cands: Vec<Candidate> = (0..n)
        .map(|j| {
            let row = &data[j * dim..(j + 1) * dim];
            let d = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            Candidate { d, idx: j }
        })
        .collect();
    let kk = k.min(n);
    if kk < n {
        cands.select_nth_unstable(kk - 1);
        cands.truncate(kk);
    }
    cands.sort_unstable();
    let mut out: Vec<usize> = cands.into_iter().map(|c| c.idx).collect();
    let last = *out.last().expect("non-empty");
    out.resize(k, last);
    out
}
