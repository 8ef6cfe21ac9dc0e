//! The finite-difference gradient suite behind `cdnet gradcheck`.
//!
//! Every case reduces its output through a fixed projection to a scalar and
//! compares analytic and central-difference gradients (ε = 1e-5). Discrete
//! selections are frozen at their first-pass values.

use std::sync::Arc;

use cdnet_autodiff::{finite_diff_check, GradCheckOptions, ParamId, ParamStore, Session, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_transformer_layer, edge_conv, self_transformer_layer, AttentionParams, EdgeConv};
use crate::attention::build_dynamic_graph;
use crate::cloud::Point3;
use crate::error::Result;
use crate::network::{ChangeNet, NetConfig};
use crate::training::cross_entropy_loss;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const LAYER_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let t = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    t.expect("shape matches data")
}

/// Keeps values 1e-2 away from zero so ReLU probes avoid the kink.
fn off_kink(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v += 2e-2_f64.copysign(*v);
        }
    }
    t
}

/// Replaces exactly-zero parameters (freshly initialized biases) with small
/// random values; a zero bias meeting a zero offset sits on a ReLU kink.
fn jitter_zeros(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(0.05..0.2) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
        }
    }
}

pub fn random_points(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)])
        .collect()
}

fn project(s: &mut Session<'_>, y: Var) -> Result<Var> {
    let shape = s.graph.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let proj: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    let p = s.constant(Tensor::new(shape, proj)?);
    let z = s.graph.mul(y, p)?;
    Ok(s.graph.sum_all(z)?)
}

fn run(
    name: &'static str,
    tolerance: f64,
    store: &ParamStore,
    probes: Option<usize>,
    mut f: impl FnMut(&mut Session<'_>) -> Result<Var>,
) -> Result<GradCase> {
    let opts = GradCheckOptions {
        max_probes_per_param: probes,
        ..GradCheckOptions::default()
    };
    let report = finite_diff_check(store, &opts, |s| {
        let y = f(s)?;
        project(s, y)
    })?;
    Ok(GradCase {
        name,
        max_rel_error: report.max_rel_error,
        tolerance,
        probes: report.probes,
    })
}

fn inputs(tensors: Vec<Tensor>) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t).expect("unique names"))
        .collect();
    (store, ids)
}

fn primitive(
    name: &'static str,
    tensors: Vec<Tensor>,
    f: impl Fn(&mut Session<'_>, &[Var]) -> Result<Var>,
) -> Result<GradCase> {
    let (store, ids) = inputs(tensors);
    run(name, PRIMITIVE_TOL, &store, None, |s| {
        let v: Vec<Var> = ids.iter().map(|&id| s.param(id)).collect();
        f(s, &v)
    })
}

/// Elementary operations, each at the primitive tolerance.
pub fn primitive_cases() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let m = random(&[4, 2], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let bias = random(&[5], &mut rng);
    let cube = random(&[2, 3, 4], &mut rng);
    let positive = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.1).collect())?;
    let idx: Arc<[usize]> = Arc::from(vec![2, 0, 0, 1, 2]);
    Ok(vec![
        primitive("add", vec![a.clone(), b.clone()], |s, v| Ok(s.graph.add(v[0], v[1])?))?,
        primitive("sub", vec![a.clone(), b.clone()], |s, v| Ok(s.graph.sub(v[0], v[1])?))?,
        primitive("mul", vec![a.clone(), b.clone()], |s, v| Ok(s.graph.mul(v[0], v[1])?))?,
        primitive("matmul", vec![a.clone(), m], |s, v| Ok(s.graph.matmul(v[0], v[1])?))?,
        primitive("linear", vec![a.clone(), w, bias], |s, v| Ok(s.graph.linear(v[0], v[1], v[2])?))?,
        primitive("relu", vec![off_kink(a.clone())], |s, v| Ok(s.graph.relu(v[0])?))?,
        primitive("softmax", vec![cube.clone()], |s, v| Ok(s.graph.softmax(v[0], 1)?))?,
        primitive("log_softmax", vec![cube.clone()], |s, v| Ok(s.graph.log_softmax(v[0], 2)?))?,
        primitive("l1_normalize", vec![positive], |s, v| Ok(s.graph.l1_normalize(v[0], 0)?))?,
        primitive("gather", vec![a.clone()], {
            let idx = idx.clone();
            move |s, v| Ok(s.graph.gather(v[0], idx.clone())?)
        })?,
        primitive("scatter_add", vec![random(&[5, 4], &mut rng)], move |s, v| Ok(s.graph.scatter_add(v[0], idx.clone(), 3)?))?,
        primitive("sum", vec![cube.clone()], |s, v| Ok(s.graph.sum(v[0], 1)?))?,
        primitive("mean", vec![cube.clone()], |s, v| Ok(s.graph.mean(v[0], 2)?))?,
        primitive("max", vec![cube.clone()], |s, v| Ok(s.graph.max(v[0], 1)?))?,
        primitive("concat", vec![a.clone(), b], |s, v| Ok(s.graph.concat(&[v[0], v[1]], 1)?))?,
        primitive("reshape", vec![cube], |s, v| Ok(s.graph.reshape(v[0], vec![6, 4])?))?,
    ])
}

/// Attention, edge-conv, loss-head and full-network checks.
pub fn layer_cases() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut cases = Vec::new();

    let (n, c, k) = (10, 4, 4);
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "attn", c, &mut rng)?;
    jitter_zeros(&mut store, &mut rng);
    let feats = random(&[n, c], &mut rng);
    let coords = random_points(n, 1.0, &mut rng);
    cases.push(run("self_transformer_layer", LAYER_TOL, &store, None, |s| {
        let x = s.constant(feats.clone());
        Ok(self_transformer_layer(s, x, &coords, k, &p)?.output)
    })?);

    let fb = random(&[7, c], &mut rng);
    let cb = random_points(7, 1.0, &mut rng);
    cases.push(run("cross_transformer_layer", LAYER_TOL, &store, None, |s| {
        let a = s.constant(feats.clone());
        let b = s.constant(fb.clone());
        Ok(cross_transformer_layer(s, a, &coords, b, &cb, k, &p)?.output)
    })?);

    let mut store = ParamStore::new();
    let e = EdgeConv::new(&mut store, "edge", c, 6, &mut rng)?;
    jitter_zeros(&mut store, &mut rng);
    let graph = build_dynamic_graph(&feats, k, 0);
    cases.push(run("edge_conv", LAYER_TOL, &store, None, |s| {
        let x = s.constant(feats.clone());
        edge_conv(s, x, &graph, &e)
    })?);

    let (store, ids) = inputs(vec![random(&[6, 2], &mut rng)]);
    let labels = [0u8, 1, 1, 0, 1, 0];
    let head = finite_diff_check(&store, &GradCheckOptions::default(), |s| {
        let logits = s.param(ids[0]);
        cross_entropy_loss(s, logits, &labels, [1.0, 3.0])
    })?;
    cases.push(GradCase {
        name: "softmax_cross_entropy",
        max_rel_error: head.max_rel_error,
        tolerance: PRIMITIVE_TOL,
        probes: head.probes,
    });

    let cfg = NetConfig {
        channels: vec![4, 4, 6, 6],
        decoder: vec![6, 6, 4, 4, 4],
        head_hidden: 4,
        k: 4,
        cross_k: 4,
        seed: 3,
        ..NetConfig::default()
    };
    let mut net = ChangeNet::new(cfg)?;
    jitter_zeros(&mut net.store, &mut rng);
    let t1 = random_points(64, 1.0, &mut rng);
    let t2 = random_points(64, 1.0, &mut rng);
    let report = finite_diff_check(
        &net.store,
        &GradCheckOptions {
            max_probes_per_param: Some(4),
            ..GradCheckOptions::default()
        },
        |s| {
            let logits = net.forward(s, &t1, &t2)?;
            let labels: Vec<u8> = (0..64).map(|i| (i % 3 == 0) as u8).collect();
            cross_entropy_loss(s, logits, &labels, [1.0, 2.0])
        },
    )?;
    cases.push(GradCase {
        name: "network_end_to_end",
        max_rel_error: report.max_rel_error,
        tolerance: LAYER_TOL,
        probes: report.probes,
    });
    Ok(cases)
}

pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let mut cases = primitive_cases()?;
    cases.extend(layer_cases()?);
    Ok(cases)
}
