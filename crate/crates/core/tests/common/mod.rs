//! Literal loop implementations used as test oracles. They read weights
//! straight out of the parameter store and share no code with the library.
#![allow(dead_code)]

use cdnet_autodiff::{Linear, Mlp2, ParamStore, Tensor};
use cdnet_core::attention::AttentionParams;
use cdnet_core::Point3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn random_rows(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn random_points(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)])
        .collect()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight);
    let b = store.get(l.bias);
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    assert_eq!(inp, x.len());
    let mut y = vec![0.0; out];
    for o in 0..out {
        let mut acc = b.data()[o];
        for i in 0..inp {
            acc += w.data()[o * inp + i] * x[i];
        }
        y[o] = acc;
    }
    y
}

pub fn mlp(store: &ParamStore, m: &Mlp2, x: &[f64]) -> Vec<f64> {
    let mut h = linear(store, &m.first, x);
    for v in &mut h {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    linear(store, &m.second, &h)
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k nearest by full sort on (distance, index); pads with the last entry.
pub fn brute_knn(data: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = data.iter().enumerate().map(|(j, r)| (sq(r, q), j)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = all.iter().take(k).map(|e| e.1).collect();
    while out.len() < k {
        out.push(*out.last().unwrap());
    }
    out
}

pub fn brute_knn3(points: &[Point3], q: &Point3, k: usize) -> Vec<usize> {
    let data: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    brute_knn(&data, q, k)
}

/// Self first, then the other points by (distance, index).
pub fn brute_dynamic_graph(feats: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..feats.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> =
                (0..feats.len()).filter(|&j| j != i).map(|j| (sq(&feats[i], &feats[j]), j)).collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut row = vec![i];
            row.extend(others.iter().take(k - 1).map(|e| e.1));
            while row.len() < k {
                row.push(*row.last().unwrap());
            }
            row
        })
        .collect()
}

/// Output rows and the `[i][j][c]` weights of vector attention, channel by channel.
pub fn attention(
    store: &ParamStore,
    p: &AttentionParams,
    qf: &[Vec<f64>],
    qc: &[Point3],
    kf: &[Vec<f64>],
    kc: &[Point3],
    nbrs: &[Vec<usize>],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let c = p.width;
    let mut out = Vec::new();
    let mut all_w = Vec::new();
    for i in 0..qf.len() {
        let phi = linear(store, &p.phi, &qf[i]);
        let mut logits = Vec::new();
        let mut values = Vec::new();
        for &j in &nbrs[i] {
            let rel = [qc[i][0] - kc[j][0], qc[i][1] - kc[j][1], qc[i][2] - kc[j][2]];
            let sigma = mlp(store, &p.sigma, &rel);
            let omega = linear(store, &p.omega, &kf[j]);
            let alpha = linear(store, &p.alpha, &kf[j]);
            let arg: Vec<f64> = (0..c).map(|ch| phi[ch] - omega[ch] + sigma[ch]).collect();
            logits.push(mlp(store, &p.beta, &arg));
            values.push((0..c).map(|ch| alpha[ch] + sigma[ch]).collect::<Vec<f64>>());
        }
        let k = logits.len();
        let mut w = vec![vec![0.0; c]; k];
        let mut y = qf[i].clone();
        for ch in 0..c {
            let m = (0..k).map(|j| logits[j][ch]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..k).map(|j| (logits[j][ch] - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let soft: Vec<f64> = e.iter().map(|v| v / z).collect();
            let l1: f64 = soft.iter().map(|v| v.abs()).sum();
            for j in 0..k {
                w[j][ch] = soft[j] / l1;
                y[ch] += w[j][ch] * values[j][ch];
            }
        }
        out.push(y);
        all_w.push(w);
    }
    (out, all_w)
}

/// `max_j MLP([x_i, x_j − x_i])` per channel.
pub fn edge_conv(store: &ParamStore, m: &Mlp2, x: &[Vec<f64>], centers: &[usize], nbrs: &[Vec<usize>]) -> Vec<Vec<f64>> {
    centers
        .iter()
        .zip(nbrs)
        .map(|(&i, js)| {
            let mut best: Option<Vec<f64>> = None;
            for &j in js {
                let mut e = x[i].clone();
                e.extend(x[j].iter().zip(&x[i]).map(|(a, b)| a - b));
                let h = mlp(store, m, &e);
                best = Some(match best {
                    None => h,
                    Some(b) => b.iter().zip(&h).map(|(a, c)| a.max(*c)).collect(),
                });
            }
            best.unwrap()
        })
        .collect()
}

/// Inverse-distance interpolation over the 3 nearest coarse points, with
/// exact copy on coincidence and repeated neighbors counted once.
pub fn idw(coarse: &[Point3], coarse_feats: &[Vec<f64>], fine: &[Point3]) -> Vec<Vec<f64>> {
    fine.iter()
        .map(|q| {
            let nn = brute_knn3(coarse, q, 3);
            let d0 = sq(&coarse[nn[0]], q);
            if d0 == 0.0 {
                return coarse_feats[nn[0]].clone();
            }
            let mut seen = Vec::new();
            let mut acc = vec![0.0; coarse_feats[0].len()];
            let mut total = 0.0;
            for &j in &nn {
                if seen.contains(&j) {
                    continue;
                }
                seen.push(j);
                let w = 1.0 / (sq(&coarse[j], q) + 1e-8);
                total += w;
                for (a, f) in acc.iter_mut().zip(&coarse_feats[j]) {
                    *a += w * f;
                }
            }
            acc.iter().map(|a| a / total).collect()
        })
        .collect()
}

/// `feat_a(i)` minus the mean of `feat_b` over the `k` points of B nearest to `a_i`.
pub fn nearest_difference(fa: &[Vec<f64>], ca: &[Point3], fb: &[Vec<f64>], cb: &[Point3], k: usize) -> Vec<Vec<f64>> {
    fa.iter()
        .zip(ca)
        .map(|(f, p)| {
            let nn = brute_knn3(cb, p, k);
            (0..f.len())
                .map(|ch| f[ch] - nn.iter().map(|&j| fb[j][ch]).sum::<f64>() / k as f64)
                .collect()
        })
        .collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
