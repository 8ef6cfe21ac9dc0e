//! Farthest point sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{LabeledPointCloud, Point3};
use crate::error::{Error, Result};
use crate::index::sq_dist;

/// How the first sample is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// Uniform over indices, drawn from ChaCha8 seeded with the value.
    Seeded(u64),
    Index(usize),
    /// The point with lexicographically smallest (x, y, z); lowest index on ties.
    /// Independent of point order, which keeps the encoder permutation invariant.
    LowestCoordinate,
}

impl FpsStart {
    fn resolve(self, points: &[Point3]) -> usize {
        match self {
            FpsStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..points.len()),
            FpsStart::Index(i) => i,
            FpsStart::LowestCoordinate => (0..points.len())
                .min_by(|&a, &b| {
                    let (p, q) = (&points[a], &points[b]);
                    p[0].total_cmp(&q[0])
                        .then(p[1].total_cmp(&q[1]))
                        .then(p[2].total_cmp(&q[2]))
                        .then(a.cmp(&b))
                })
                .expect("non-empty"),
        }
    }
}

/// Greedy maximin subset of `m` indices. Each pick maximizes its squared
/// distance to the already chosen set; ties go to the lowest index.
pub fn fps_indices(points: &[Point3], m: usize, start: FpsStart) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("cannot sample {m} of {n} points")));
    }
    let first = start.resolve(points);
    if first >= n {
        return Err(Error::InvalidArgument(format!("start index {first} out of range for {n} points")));
    }
    let mut chosen = Vec::with_capacity(m);
    chosen.push(first);
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while chosen.len() < m {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        chosen.push(best);
        let pb = points[best];
        for (d, p) in min_d.iter_mut().zip(points) {
            let nd = sq_dist(p, &pb);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

pub fn farthest_point_sample(cloud: &LabeledPointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    fps_indices(cloud.points(), m, FpsStart::Seeded(seed))
}
