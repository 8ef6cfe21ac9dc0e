//! One line per acceptance criterion. Criteria 2 and 3 train real models and
//! take several minutes; everything else finishes in seconds.

mod common;

use std::time::{Duration, Instant};

use cdnet_autodiff::{ParamStore, Precision, Session};
use cdnet_core::attention::{
    build_dynamic_graph, cross_transformer_layer, edge_conv, self_transformer_layer, self_transformer_layer_in,
    AttentionParams, EdgeConv, NeighborSpace,
};
use cdnet_core::cloud::format_cloud;
use cdnet_core::eval::{best_threshold, c2c_distances, confusion, metrics, threshold_distances, ConfusionMatrix};
use cdnet_core::index::SpatialIndex;
use cdnet_core::network::{feature_difference, interpolate, ChangeNet, NetConfig};
use cdnet_core::synthgen::{fixture, generate_scene, ScenePair};
use cdnet_core::training::{fit, TrainConfig};
use cdnet_core::verify::gradient_suite;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OVERFIT_OA: f64 = 99.0;
const OVERFIT_MIOU: f64 = 90.0;
const OVERFIT_STEPS: usize = 200;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const GENERALIZE_MIOU: f64 = 75.0;
const GENERALIZE_STEPS: usize = 400;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_TOL: f64 = 1e-12;
const DECODE_TOL: f64 = 1e-10;
const ORACLE_INSTANCES: usize = 50;
const NORMALIZATION_TOL: f64 = 1e-9;
const NORMALIZATION_EVALS: usize = 1000;
const SYMMETRY_TOL: f64 = 1e-12;

type Verdict = (bool, String);

fn scenes(seeds: std::ops::Range<u64>) -> Vec<ScenePair> {
    seeds.map(|s| generate_scene(&fixture(s)).expect("fixture generates")).collect()
}

fn random_params(c: usize, rng: &mut ChaCha8Rng) -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "a", c, rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    (store, p)
}

fn overfit() -> Verdict {
    let pair = generate_scene(&fixture(7)).unwrap();
    let mut net = ChangeNet::new(NetConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: OVERFIT_STEPS / 2,
        seed: 1,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let r = fit(&mut net, &cfg, std::slice::from_ref(&pair), &[], None).unwrap();
    let took = start.elapsed();
    let last = &r.log.last().unwrap().report;
    let ok = last.oa >= OVERFIT_OA && last.miou >= OVERFIT_MIOU && took <= OVERFIT_BUDGET;
    (
        ok,
        format!(
            "OA {:.2} (>= {OVERFIT_OA}), mIoU {:.2} (>= {OVERFIT_MIOU}) after {} steps in {:.0} s (<= {} s)",
            last.oa,
            last.miou,
            r.step_losses.len(),
            took.as_secs_f64(),
            OVERFIT_BUDGET.as_secs()
        ),
    )
}

fn generalize() -> Verdict {
    let train = scenes(7..15);
    let test = scenes(15..17);
    let dist = |v: &[ScenePair]| -> Vec<(Vec<f64>, Vec<u8>)> {
        v.iter()
            .map(|p| (c2c_distances(&p.t1, &p.t2).unwrap(), p.t2.labels().unwrap().to_vec()))
            .collect()
    };
    let (t, _) = best_threshold(&dist(&train)).unwrap();
    let mut c = ConfusionMatrix::default();
    for (d, truth) in dist(&test) {
        c.merge(&confusion(&threshold_distances(&d, t), &truth).unwrap());
    }
    let c2c = metrics(&c).unwrap().miou;

    let mut net = ChangeNet::new(NetConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: GENERALIZE_STEPS,
        seed: 1,
        ..TrainConfig::default()
    };
    let r = fit(&mut net, &cfg, &train, &test, None).unwrap();
    let miou = r.log.last().unwrap().report.miou;
    (
        miou >= GENERALIZE_MIOU && miou > c2c,
        format!("test mIoU {miou:.2} (>= {GENERALIZE_MIOU} and > C2C {c2c:.2} at train-chosen threshold {t:.3} m)"),
    )
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let cases = gradient_suite().unwrap();
    let took = start.elapsed();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} {:.2e}", c.name, c.max_rel_error))
        .collect();
    let worst = cases.iter().map(|c| c.max_rel_error / c.tolerance).fold(0.0, f64::max);
    (
        failed.is_empty() && took < GRAD_BUDGET,
        format!(
            "{} cases, worst error/tolerance {worst:.1e}, {:.1} s (< {} s){}",
            cases.len(),
            took.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 7];
    let mut knn_mismatch = 0;
    let mut confusion_mismatch = 0;
    let store0 = ParamStore::new();
    for _ in 0..ORACLE_INSTANCES {
        let (n, m, c, k) = (rng.gen_range(2..16), rng.gen_range(1..12), rng.gen_range(1..6), rng.gen_range(1..6));
        let (store, p) = random_params(c, &mut rng);
        let (f, g) = (random_rows(n, c, &mut rng), random_rows(m, c, &mut rng));
        let (ca, cb) = (random_points(n, 2.0, &mut rng), random_points(m, 2.0, &mut rng));

        let mut s = Session::inference(&store, Precision::F64);
        let (a, b) = (s.constant(tensor(&f)), s.constant(tensor(&g)));
        let out = self_transformer_layer(&mut s, a, &ca, k, &p).unwrap();
        let want = attention(&store, &p, &f, &ca, &f, &ca, &brute_dynamic_graph(&f, k)).0;
        worst[0] = worst[0].max(max_diff(&rows(s.value(out.output)), &want));

        let out = cross_transformer_layer(&mut s, a, &ca, b, &cb, k, &p).unwrap();
        let nbrs: Vec<_> = ca.iter().map(|q| brute_knn3(&cb, q, k)).collect();
        let want = attention(&store, &p, &f, &ca, &g, &cb, &nbrs).0;
        worst[1] = worst[1].max(max_diff(&rows(s.value(out.output)), &want));

        let mut estore = ParamStore::new();
        let e = EdgeConv::new(&mut estore, "e", c, rng.gen_range(1..6), &mut rng).unwrap();
        let graph = build_dynamic_graph(&tensor(&f), k, 0);
        let mut es = Session::inference(&estore, Precision::F64);
        let x = es.constant(tensor(&f));
        let y = edge_conv(&mut es, x, &graph, &e).unwrap();
        let centers: Vec<usize> = (0..n).collect();
        let want = common::edge_conv(&estore, &e.mlp, &f, &centers, &brute_dynamic_graph(&f, k));
        worst[2] = worst[2].max(max_diff(&rows(es.value(y)), &want));

        let mut ds = Session::inference(&store0, Precision::F64);
        let (a, b) = (ds.constant(tensor(&f)), ds.constant(tensor(&g)));
        let dk = rng.gen_range(1..4);
        let d = feature_difference(&mut ds, a, &ca, b, &cb, dk).unwrap();
        worst[3] = worst[3].max(max_diff(&rows(ds.value(d)), &nearest_difference(&f, &ca, &g, &cb, dk)));

        let fine = random_points(rng.gen_range(1..40), 2.0, &mut rng);
        let up = interpolate(&mut ds, b, &cb, &fine).unwrap();
        worst[4] = worst[4].max(max_diff(&rows(ds.value(up)), &idw(&cb, &g, &fine)));

        let cloud = random_points(rng.gen_range(1..300), 3.0, &mut rng);
        let index = SpatialIndex::from_points("c", cloud.clone()).unwrap();
        for q in random_points(5, 3.5, &mut rng) {
            let kk = rng.gen_range(1..12);
            if index.knn(&q, kk).indices != brute_knn3(&cloud, &q, kk) {
                knn_mismatch += 1;
            }
        }

        let len = rng.gen_range(1..1000);
        let pred: Vec<u8> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        let truth: Vec<u8> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        let mut counts = [[0u64; 2]; 2];
        for (&p, &t) in pred.iter().zip(&truth) {
            counts[p as usize][t as usize] += 1;
        }
        let got = confusion(&pred, &truth).unwrap();
        if (got.tp, got.tn, got.fp, got.fn_) != (counts[1][1], counts[0][0], counts[1][0], counts[0][1]) {
            confusion_mismatch += 1;
        }
    }
    let ok = worst[..4].iter().all(|&w| w <= ORACLE_TOL) && worst[4] <= DECODE_TOL && knn_mismatch == 0 && confusion_mismatch == 0;
    (
        ok,
        format!(
            "{ORACLE_INSTANCES} instances each; max |diff| self {:.1e}, cross {:.1e}, edge_conv {:.1e}, difference {:.1e} (<= {ORACLE_TOL:.0e}), decode {:.1e} (<= {DECODE_TOL:.0e}); KNN mismatches {knn_mismatch}, confusion mismatches {confusion_mismatch}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn residual_identity() -> Verdict {
    let mut net = ChangeNet::new(NetConfig::default()).unwrap();
    let layers: Vec<AttentionParams> = net
        .weights
        .encoder
        .iter()
        .map(|l| l.attention.clone())
        .chain(net.weights.cross.iter().cloned())
        .collect();
    for p in &layers {
        p.zero_residual_branch(&mut net.store);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = 0;
    for p in &layers {
        let f = random_rows(40, p.width, &mut rng);
        let g = random_rows(25, p.width, &mut rng);
        let (ca, cb) = (random_points(40, 3.0, &mut rng), random_points(25, 3.0, &mut rng));
        let mut s = Session::inference(&net.store, Precision::F64);
        let (a, b) = (s.constant(tensor(&f)), s.constant(tensor(&g)));
        let outs = [
            self_transformer_layer_in(&mut s, NeighborSpace::Feature, a, &ca, 16, p).unwrap().output,
            self_transformer_layer_in(&mut s, NeighborSpace::Coordinate, a, &ca, 16, p).unwrap().output,
            cross_transformer_layer(&mut s, a, &ca, b, &cb, 16, p).unwrap().output,
        ];
        exact += outs.iter().filter(|&&o| rows(s.value(o)) == f).count();
    }
    let total = 3 * layers.len();
    (exact == total, format!("{exact}/{total} layer evaluations return the input bit for bit"))
}

fn normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut negative, mut columns) = (0.0f64, 0usize, 0usize);
    for t in 0..NORMALIZATION_EVALS {
        let (n, c, k) = (rng.gen_range(1..12), rng.gen_range(1..6), rng.gen_range(1..8));
        let (store, p) = random_params(c, &mut rng);
        let scale = 10f64.powi(rng.gen_range(-2..3));
        let f: Vec<Vec<f64>> = random_rows(n, c, &mut rng).into_iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let pts = random_points(n, scale, &mut rng);
        let mut s = Session::inference(&store, Precision::F64);
        let x = s.constant(tensor(&f));
        let out = if t % 2 == 0 {
            self_transformer_layer(&mut s, x, &pts, k, &p).unwrap()
        } else {
            let g = random_rows(n + 3, c, &mut rng);
            let y = s.constant(tensor(&g));
            cross_transformer_layer(&mut s, x, &pts, y, &random_points(n + 3, scale, &mut rng), k, &p).unwrap()
        };
        let w = s.value(out.weights);
        for i in 0..n {
            for ch in 0..c {
                let col: Vec<f64> = (0..k).map(|j| w.data()[(i * k + j) * c + ch]).collect();
                negative += col.iter().filter(|&&v| v < 0.0).count();
                worst = worst.max((col.iter().sum::<f64>() - 1.0).abs());
                columns += 1;
            }
        }
    }
    (
        negative == 0 && worst <= NORMALIZATION_TOL,
        format!("{NORMALIZATION_EVALS} evaluations, {columns} weight columns: {negative} negative, max |sum - 1| {worst:.1e} (<= {NORMALIZATION_TOL:.0e})"),
    )
}

fn symmetry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, c, k) = (rng.gen_range(1..20), rng.gen_range(1..6), rng.gen_range(1..8));
        let (store, p) = random_params(c, &mut rng);
        let f = random_rows(n, c, &mut rng);
        let pts = random_points(n, 1.0, &mut rng);
        let mut s = Session::inference(&store, Precision::F64);
        let (a, b) = (s.constant(tensor(&f)), s.constant(tensor(&f)));
        let cross = cross_transformer_layer(&mut s, a, &pts, b, &pts, k, &p).unwrap().output;
        let own = self_transformer_layer_in(&mut s, NeighborSpace::Coordinate, a, &pts, k, &p).unwrap().output;
        worst = worst.max(s.value(cross).max_abs_diff(s.value(own)));
    }
    let net = ChangeNet::new(NetConfig::default()).unwrap();
    let cloud = random_points(600, 5.0, &mut rng);
    let mut s = Session::inference(&net.store, Precision::F64);
    let p1 = net.encode(&mut s, &cloud).unwrap();
    let p2 = net.encode(&mut s, &cloud).unwrap();
    let same = p1
        .levels
        .iter()
        .zip(&p2.levels)
        .all(|(x, y)| x.coords == y.coords && s.value(x.features).data() == s.value(y.features).data());
    (
        worst <= SYMMETRY_TOL && same,
        format!(
            "cross vs coordinate self-attention max |diff| {worst:.1e} (<= {SYMMETRY_TOL:.0e}); branch pyramids identical: {same}"
        ),
    )
}

fn worked_metrics() -> Verdict {
    let (tp, fn_, fp, tn) = (90.0, 5.0, 5.0, 900.0);
    let derived = [
        (tp + tn) / (tp + tn + fp + fn_),
        (tp / (tp + fn_) + tn / (tn + fp)) / 2.0,
        (tp / (tp + fp) + tn / (tn + fn_)) / 2.0,
        (2.0 * tp / (2.0 * tp + fp + fn_) + 2.0 * tn / (2.0 * tn + fp + fn_)) / 2.0,
        (tp / (tp + fp + fn_) + tn / (tn + fp + fn_)) / 2.0,
    ]
    .map(|v: f64| (v * 10000.0).round() / 100.0);
    let r = metrics(&ConfusionMatrix { tp: 90, tn: 900, fp: 5, fn_: 5 }).unwrap();
    let got = [r.oa, r.mrecall, r.mprecision, r.mf1, r.miou].map(|v| (v * 100.0).round() / 100.0);
    let target = [99.00, 97.09, 97.09, 97.09, 94.45];
    (
        got == target && derived == target,
        format!("computed {got:?}, independently derived {derived:?}, expected {target:?}"),
    )
}

fn determinism() -> Verdict {
    let specs: Vec<_> = (7..9).map(fixture).collect();
    let render = |p: &ScenePair| format_cloud(&p.t1) + &format_cloud(&p.t2);
    let synth_same = specs
        .iter()
        .all(|s| render(&generate_scene(s).unwrap()) == render(&generate_scene(s).unwrap()));

    let train = scenes(7..8);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut net = ChangeNet::new(NetConfig::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 3,
            chunk: 256,
            seed: 4,
            ..TrainConfig::default()
        };
        fit(&mut net, &cfg, &train, &[], Some(dir.path())).unwrap();
        ["best.ckpt", "best.ckpt.manifest", "last.ckpt", "metrics.csv"].map(|f| std::fs::read(dir.path().join(f)).unwrap())
    };
    let train_same = run() == run();
    (
        synth_same && train_same,
        format!("synth reruns identical: {synth_same}; train artifacts identical: {train_same}"),
    )
}

fn main() {
    let criteria: [(usize, &str, fn() -> Verdict); 9] = [
        (2, "desk-scale overfit", overfit),
        (3, "generalization", generalize),
        (4, "gradient suite", gradients),
        (5, "oracle equivalence", oracles),
        (6, "residual identity", residual_identity),
        (7, "normalization", normalization),
        (8, "symmetry", symmetry),
        (9, "worked metrics example", worked_metrics),
        (10, "determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    println!("criterion 1: N/A  published dataset results are not reproducible here (private data); criteria 2-10 substitute");
    let mut passed = 0;
    let mut run = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let (ok, detail) = check();
        run += 1;
        passed += usize::from(ok);
        println!("criterion {n}: {}  {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("{passed}/{run} criteria passed");
}
