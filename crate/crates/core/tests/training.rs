mod common;

use cdnet_autodiff::{ParamStore, Session, Tensor};
use cdnet_core::network::{ChangeNet, NetConfig};
use cdnet_core::synthgen::{fixture, generate_scene, random_ops, ScenePair, SceneSpec, Surface};
use cdnet_core::training::*;
use cdnet_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_net() -> ChangeNet {
    ChangeNet::new(NetConfig {
        channels: vec![4, 6, 8, 8],
        decoder: vec![8, 8, 6, 4, 4],
        head_hidden: 4,
        k: 6,
        cross_k: 4,
        seed: 2,
        ..NetConfig::default()
    })
    .unwrap()
}

fn tiny_scene(seed: u64) -> ScenePair {
    let mut spec = SceneSpec {
        id: format!("tiny_{seed}"),
        surface: Surface::Ground,
        extent: [8.0, 8.0],
        density: 6.0,
        noise: 0.02,
        ops: Vec::new(),
        seed,
    };
    spec.ops = random_ops(&spec, seed);
    generate_scene(&spec).unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        steps_per_epoch: 3,
        chunk: 64,
        seed: 9,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

fn loss_of(logits: Vec<Vec<f64>>, labels: &[u8], w: [f64; 2]) -> f64 {
    let store = ParamStore::new();
    let mut s = Session::new(&store);
    let l = s.constant(Tensor::from_rows(&logits).unwrap());
    let loss = cross_entropy_loss(&mut s, l, labels, w).unwrap();
    s.value(loss).item()
}

#[test]
fn cross_entropy_examples() {
    assert!((loss_of(vec![vec![0.0, 0.0]; 3], &[0, 1, 1], [1.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(loss_of(vec![vec![60.0, -60.0], vec![-60.0, 60.0]], &[0, 1], [1.0, 1.0]) < 1e-40);
    // all-changed, weights (1, 3): 3·ln2 summed, divided by the weight total 3·n
    let got = loss_of(vec![vec![0.0, 0.0]; 4], &[1; 4], [1.0, 3.0]);
    assert!((got - 4.0 * 3.0 * 2f64.ln() / 12.0).abs() < 1e-15);
}

#[test]
fn cross_entropy_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.gen_range(1..40);
        let logits = common::random_rows(n, 2, &mut rng);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let w = [rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0)];
        let (mut num, mut den) = (0.0, 0.0);
        for (l, &y) in logits.iter().zip(&labels) {
            let z = l[0].exp() + l[1].exp();
            num += w[y as usize] * -(l[y as usize].exp() / z).ln();
            den += w[y as usize];
        }
        assert!((loss_of(logits, &labels, w) - num / den).abs() < 1e-12);
    }
}

#[test]
fn inverse_frequency_weights_balance_classes() {
    let scene = tiny_scene(3);
    let labels = scene.t2.labels().unwrap();
    let ones = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64;
    let w = inverse_frequency_weights(std::slice::from_ref(&scene));
    assert!((w[0] * (n - ones) - n / 2.0).abs() < 1e-9);
    assert!((w[1] * ones - n / 2.0).abs() < 1e-9);
}

#[test]
fn crops_are_centered_and_consistent() {
    let scene = tiny_scene(4);
    let crop = crop_pair(&scene, 10, 64).unwrap();
    assert_eq!(crop.t2.len(), 64);
    assert!(!crop.t1.is_empty() && crop.t1.len() <= 128);
    assert_eq!(crop.t2[0], [0.0; 3]);
    let labels = scene.t2.labels().unwrap();
    for ((p, &i), &l) in crop.t2.iter().zip(&crop.t2_indices).zip(crop.labels.as_ref().unwrap()) {
        let q = scene.t2.points()[i];
        assert_eq!(*p, [q[0] - crop.center[0], q[1] - crop.center[1], q[2] - crop.center[2]]);
        assert_eq!(l, labels[i]);
    }
    assert!(crop_pair(&scene, scene.t2.len(), 64).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() {
    let scene = tiny_scene(5);
    let mut net = tiny_net();
    let before = net.store.clone();
    let cfg = TrainConfig { lr: 0.0, ..tiny_cfg() };
    fit(&mut net, &cfg, std::slice::from_ref(&scene), &[], None).unwrap();
    assert_eq!(net.store, before);
}

#[test]
fn training_is_deterministic() {
    let scenes = vec![tiny_scene(6), tiny_scene(7)];
    let run = || {
        let mut net = tiny_net();
        let r = fit(&mut net, &tiny_cfg(), &scenes, &[], None).unwrap();
        (r.csv(), r.step_losses, net.store)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.0, b.0);
    assert_eq!(a.2, b.2);
}

#[test]
fn zero_epochs_still_writes_checkpoints_and_one_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(8);
    let mut net = tiny_net();
    let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
    let r = fit(&mut net, &cfg, std::slice::from_ref(&scene), &[], Some(dir.path())).unwrap();
    assert_eq!(r.log.len(), 1);
    assert!(r.log[0].loss.is_nan());
    assert!(r.step_losses.is_empty());
    for f in ["best.ckpt", "last.ckpt", "metrics.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn log_has_one_row_per_epoch_plus_the_initial_one() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (vec![tiny_scene(9)], vec![tiny_scene(10)]);
    let mut net = tiny_net();
    let cfg = TrainConfig { epochs: 3, steps_per_epoch: 2, checkpoint_every: 2, ..tiny_cfg() };
    let r = fit(&mut net, &cfg, &train, &test, Some(dir.path())).unwrap();
    assert_eq!(r.log.len(), 4);
    assert_eq!(r.step_losses.len(), 6);
    assert_eq!(r.log.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert!(dir.path().join("epoch_2.ckpt").exists());
    assert!(!dir.path().join("epoch_1.ckpt").exists());
    let best = r.log.iter().map(|e| e.report.miou).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.log[r.best_epoch].report.miou, best);
    let back = ChangeNet::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(back.store, r.best);
}

#[test]
fn non_finite_loss_is_a_numeric_error_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(11);
    let mut net = tiny_net();
    let id = net.weights.head.second.bias;
    net.store.get_mut(id).data_mut()[0] = f64::NAN;
    let crop = crop_pair(&scene, 0, 64).unwrap();
    let mut opt = Adam::new(&net.store, &tiny_cfg());
    let err = train_step(&mut net, &mut opt, &crop, [1.0, 1.0], Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(dir.path().join("nonfinite_t1.xyz").exists());
    assert!(dir.path().join("nonfinite_t2.xyzl").exists());
}

#[test]
fn invalid_configs_and_empty_splits_are_rejected() {
    let scene = tiny_scene(12);
    let mut net = tiny_net();
    assert!(fit(&mut net, &tiny_cfg(), &[], &[], None).is_err());
    let cfg = TrainConfig { chunk: 10, ..tiny_cfg() };
    assert!(matches!(fit(&mut net, &cfg, &[scene], &[], None), Err(Error::Config(_))));
}

#[test]
fn predictions_cover_every_point() {
    let scene = tiny_scene(13);
    let net = tiny_net();
    let pred = predict_scene(&net, &scene, 64, 1, cdnet_autodiff::Precision::F64).unwrap();
    assert_eq!(pred.len(), scene.t2.len());
    assert!(pred.iter().all(|&p| p <= 1));
}

#[test]
fn loss_strictly_decreases_over_ten_steps_on_a_fixture_crop() {
    let scene = generate_scene(&fixture(7)).unwrap();
    let labels = scene.t2.labels().unwrap();
    let center = labels.iter().position(|&l| l == 1).unwrap();
    let crop = crop_pair(&scene, center, 1024).unwrap();
    let mut net = ChangeNet::new(NetConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let mut opt = Adam::new(&net.store, &cfg);
    let w = inverse_frequency_weights(std::slice::from_ref(&scene));
    let losses: Vec<f64> = (0..11).map(|_| train_step(&mut net, &mut opt, &crop, w, None).unwrap()).collect();
    for t in 1..losses.len() {
        assert!(losses[t] < losses[t - 1], "{losses:?}");
    }
}
