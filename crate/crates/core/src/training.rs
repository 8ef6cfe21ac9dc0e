//! Loss, optimizer, crops, and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cdnet_autodiff::{ParamStore, Precision, Session, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Epoch, LabeledPointCloud, Point3};
use crate::config::KvWriter;
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics, ConfusionMatrix, MetricReport};
use crate::index::SpatialIndex;
use crate::network::ChangeNet;
use crate::synthgen::ScenePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// `None` derives inverse class frequencies from the train split.
    pub class_weights: Option<[f64; 2]>,
    pub seed: u64,
    /// Points per crop.
    pub chunk: usize,
    /// Write an extra checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Where to write the offending crop when the loss stops being finite.
    pub dump_dir: Option<PathBuf>,
    /// Draw half of the crop centers from changed points.
    pub balanced: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            steps_per_epoch: 20,
            class_weights: None,
            seed: 0,
            chunk: 1024,
            checkpoint_every: 0,
            dump_dir: None,
            balanced: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("train.lr {} must be a non-negative number", self.lr)));
        }
        if self.chunk < 64 {
            return Err(Error::Config(format!("train.chunk {} is below 64", self.chunk)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("train.beta1/beta2 must lie in [0, 1) and train.eps be positive".into()));
        }
        if let Some(w) = self.class_weights {
            if !w.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.class_weights {w:?} must be positive")));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("train.lr", self.lr);
        w.put("train.optimizer", "adam");
        w.put("train.beta1", self.beta1);
        w.put("train.beta2", self.beta2);
        w.put("train.eps", self.eps);
        w.put("train.epochs", self.epochs);
        w.put("train.steps_per_epoch", self.steps_per_epoch);
        match self.class_weights {
            Some(cw) => w.list("train.class_weights", &cw),
            None => w.put("train.class_weights", "auto"),
        }
        w.put("train.seed", self.seed);
        w.put("train.chunk", self.chunk);
        w.put("train.checkpoint_every", self.checkpoint_every);
        w.put("train.balanced", self.balanced);
        w.put(
            "train.dump_dir",
            self.dump_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
    }

    /// Applies one `train.*` key; returns false for keys outside this section.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("`{key}`: cannot parse `{value}`"));
        let float = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match key {
            "train.lr" => self.lr = float(value)?,
            "train.optimizer" => match value {
                "adam" => self.optimizer = Optimizer::Adam,
                _ => return Err(Error::Config(format!("`{key}`: unknown optimizer `{value}`"))),
            },
            "train.beta1" => self.beta1 = float(value)?,
            "train.beta2" => self.beta2 = float(value)?,
            "train.eps" => self.eps = float(value)?,
            "train.epochs" => self.epochs = int(value)?,
            "train.steps_per_epoch" => self.steps_per_epoch = int(value)?,
            "train.class_weights" => {
                self.class_weights = if value == "auto" {
                    None
                } else {
                    let v: Vec<f64> = crate::config::parse_list(key, value)?;
                    match v[..] {
                        [a, b] => Some([a, b]),
                        _ => return Err(Error::Config(format!("`{key}` needs two values or `auto`"))),
                    }
                }
            }
            "train.seed" => self.seed = value.parse().map_err(|_| bad())?,
            "train.chunk" => self.chunk = int(value)?,
            "train.checkpoint_every" => self.checkpoint_every = int(value)?,
            "train.balanced" => self.balanced = value.parse().map_err(|_| bad())?,
            "train.dump_dir" => self.dump_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Adaptive-moment optimizer. A tensor whose gradient is entirely zero is
/// skipped: neither its values nor its moments change on that step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), (m, v)) in ids.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if g.data().iter().all(|x| *x == 0.0) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `Σ_i w[y_i] · (−log p_i[y_i]) / Σ_i w[y_i]` as a graph node.
pub fn cross_entropy_loss(s: &mut Session<'_>, logits: Var, labels: &[u8], weights: [f64; 2]) -> Result<Var> {
    let shape = s.graph.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() {
        return Err(Error::Validation(format!("{} labels for logits of shape {shape:?}", labels.len())));
    }
    let n = labels.len();
    let total: f64 = labels.iter().map(|&y| weights[y as usize]).sum();
    let logp = s.graph.log_softmax(logits, 1)?;
    let flat = s.graph.reshape(logp, vec![2 * n, 1])?;
    let pick: Arc<[usize]> = labels.iter().enumerate().map(|(i, &y)| 2 * i + y as usize).collect();
    let picked = s.graph.gather(flat, pick)?;
    let w: Vec<f64> = labels.iter().map(|&y| -weights[y as usize] / total).collect();
    let w = s.constant(Tensor::new(vec![n, 1], w)?);
    let weighted = s.graph.mul(picked, w)?;
    Ok(s.graph.sum_all(weighted)?)
}

/// Inverse class frequency, `total / (2 · count_c)`; absent classes get 1.
pub fn inverse_frequency_weights(scenes: &[ScenePair]) -> [f64; 2] {
    let mut counts = [0u64; 2];
    for s in scenes {
        for &l in s.t2.labels().unwrap_or(&[]) {
            counts[l as usize] += 1;
        }
    }
    let total = (counts[0] + counts[1]) as f64;
    counts.map(|c| if c == 0 { 1.0 } else { total / (2.0 * c as f64) })
}

/// A co-registered pair of crops, translated so the crop center is the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub center: Point3,
    pub t1: Vec<Point3>,
    pub t2: Vec<Point3>,
    /// Index of each T2 crop point in the full T2 cloud.
    pub t2_indices: Vec<usize>,
    pub labels: Option<Vec<u8>>,
}

/// Spatial index of both epochs of one scene, built once for all crops.
pub struct SceneIndex<'a> {
    pub pair: &'a ScenePair,
    t1: SpatialIndex,
    t2: SpatialIndex,
}

impl<'a> SceneIndex<'a> {
    pub fn new(pair: &'a ScenePair) -> Result<Self> {
        Ok(Self {
            pair,
            t1: SpatialIndex::build(&pair.t1)?,
            t2: SpatialIndex::build(&pair.t2)?,
        })
    }

    /// The `chunk` T2 points nearest to T2 point `center`, and the T1 points
    /// inside the sphere they span (at most `2 · chunk`, nearest first; the
    /// `chunk` nearest T1 points when the sphere holds none).
    pub fn crop(&self, center: usize, chunk: usize) -> CropPair {
        let c = self.pair.t2.points()[center];
        let k2 = chunk.min(self.t2.len());
        let near2 = self.t2.knn(&c, k2);
        let r2 = *near2.sq_dists.last().expect("k >= 1");
        let mut near1 = self.t1.within(&c, r2);
        near1.truncate(2 * chunk);
        if near1.is_empty() {
            near1 = self.t1.knn(&c, chunk.min(self.t1.len())).indices;
        }
        let shift = |p: &Point3| [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        CropPair {
            center: c,
            t1: near1.iter().map(|&i| shift(&self.pair.t1.points()[i])).collect(),
            t2: near2.indices.iter().map(|&i| shift(&self.pair.t2.points()[i])).collect(),
            labels: self.pair.t2.labels().map(|l| near2.indices.iter().map(|&i| l[i]).collect()),
            t2_indices: near2.indices,
        }
    }
}

pub fn crop_pair(pair: &ScenePair, center: usize, chunk: usize) -> Result<CropPair> {
    if center >= pair.t2.len() {
        return Err(Error::InvalidArgument(format!("crop center {center} outside {} T2 points", pair.t2.len())));
    }
    Ok(SceneIndex::new(pair)?.crop(center, chunk))
}

/// One forward, backward and update on a crop; returns the loss before the update.
pub fn train_step(net: &mut ChangeNet, opt: &mut Adam, crop: &CropPair, weights: [f64; 2], dump_dir: Option<&Path>) -> Result<f64> {
    let labels = crop
        .labels
        .as_deref()
        .ok_or_else(|| Error::Validation("training crop has no labels".into()))?;
    let (loss, grads) = {
        let mut s = Session::new(&net.store);
        let logits = net.forward(&mut s, &crop.t1, &crop.t2)?;
        let loss = cross_entropy_loss(&mut s, logits, labels, weights)?;
        let value = s.value(loss).item();
        if !value.is_finite() {
            let dumped = match dump_dir {
                Some(dir) => format!("; crop written to {}", dump_crop(dir, crop)?.display()),
                None => String::new(),
            };
            return Err(Error::Numeric(format!(
                "loss is {value} on the crop centered at {:?}{dumped}",
                crop.center
            )));
        }
        (value, s.param_grads(loss)?)
    };
    opt.update(&mut net.store, &grads);
    Ok(loss)
}

fn dump_crop(dir: &Path, crop: &CropPair) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let t1 = LabeledPointCloud::new("dump_t1", Epoch::T1, crop.t1.clone(), None)?;
    let t2 = LabeledPointCloud::new("dump_t2", Epoch::T2, crop.t2.clone(), crop.labels.clone())?;
    crate::cloud::save_cloud(&t1, dir.join("nonfinite_t1.xyz"))?;
    crate::cloud::save_cloud(&t2, dir.join("nonfinite_t2.xyzl"))?;
    Ok(dir.to_path_buf())
}

/// Predicts every T2 point by covering the cloud with crops. Centers are
/// drawn in seeded order from points not yet predicted; each crop assigns
/// its argmax to the still unassigned points among the nearest half of the
/// crop, where context surrounds the point on all sides.
pub fn predict_scene(net: &ChangeNet, pair: &ScenePair, chunk: usize, seed: u64, precision: Precision) -> Result<Vec<u8>> {
    let index = SceneIndex::new(pair)?;
    let n = pair.t2.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut pred: Vec<Option<u8>> = vec![None; n];
    for &center in &order {
        if pred[center].is_some() {
            continue;
        }
        let crop = index.crop(center, chunk);
        let logits = net.predict(&crop.t1, &crop.t2, precision)?;
        if !logits.all_finite() {
            return Err(Error::Numeric(format!("non-finite logits on the crop centered at {:?}", crop.center)));
        }
        let core = crop.t2_indices.len().div_ceil(2);
        for (row, &i) in crop.t2_indices.iter().enumerate().take(core) {
            if pred[i].is_none() {
                let l = logits.row(row);
                pred[i] = Some(u8::from(l[1] > l[0]));
            }
        }
    }
    Ok(pred.into_iter().map(|p| p.expect("every point is covered")).collect())
}

/// Pooled confusion and metrics over whole scenes.
pub fn evaluate(net: &ChangeNet, scenes: &[ScenePair], chunk: usize, seed: u64) -> Result<(ConfusionMatrix, MetricReport)> {
    let mut c = ConfusionMatrix::default();
    for (i, pair) in scenes.iter().enumerate() {
        let truth = pair
            .t2
            .labels()
            .ok_or_else(|| Error::Validation(format!("scene `{}` has no T2 labels", pair.id)))?;
        let pred = predict_scene(net, pair, chunk, seed.wrapping_add(i as u64), Precision::F64)?;
        c.merge(&confusion(&pred, truth)?);
    }
    let report = metrics(&c)?;
    Ok((c, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps; NaN for epoch 0.
    pub loss: f64,
    pub report: MetricReport,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch,loss,oa,mrecall,mprecision,mf1,miou";

    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.loss, r.oa, r.mrecall, r.mprecision, r.mf1, r.miou
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub log: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best: ParamStore,
    pub class_weights: [f64; 2],
}

impl FitResult {
    pub fn csv(&self) -> String {
        let mut out = String::from(EpochRecord::HEADER);
        out.push('\n');
        for r in &self.log {
            let _ = writeln!(out, "{}", r.csv());
        }
        out
    }
}

/// Trains on random crops of `train` and evaluates whole scenes of `test`
/// (or of `train` when `test` is empty) after every epoch, starting with the
/// untrained model as epoch 0. With `out`, writes `best.ckpt`, `last.ckpt`,
/// periodic `epoch_N.ckpt` files and `metrics.csv`.
pub fn fit(net: &mut ChangeNet, cfg: &TrainConfig, train: &[ScenePair], test: &[ScenePair], out: Option<&Path>) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("the train split is empty".into()));
    }
    let weights = cfg.class_weights.unwrap_or_else(|| inverse_frequency_weights(train));
    let eval_set = if test.is_empty() { train } else { test };
    let eval_seed = cfg.seed ^ 0xe5a1;
    let indexes = train.iter().map(SceneIndex::new).collect::<Result<Vec<_>>>()?;
    let changed: Vec<Vec<usize>> = train
        .iter()
        .map(|p| {
            let labels = p.t2.labels().unwrap_or(&[]);
            (0..labels.len()).filter(|&i| labels[i] == 1).collect()
        })
        .collect();
    let mut opt = Adam::new(&net.store, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }

    let (_, report) = evaluate(net, eval_set, cfg.chunk, eval_seed)?;
    let mut log = vec![EpochRecord {
        epoch: 0,
        loss: f64::NAN,
        report,
    }];
    let mut best = (0, net.store.clone(), log[0].report.miou);
    let mut step_losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let scene = rng.gen_range(0..indexes.len());
            let center = if cfg.balanced && !changed[scene].is_empty() && rng.gen_bool(0.5) {
                changed[scene][rng.gen_range(0..changed[scene].len())]
            } else {
                rng.gen_range(0..train[scene].t2.len())
            };
            let crop = indexes[scene].crop(center, cfg.chunk);
            let loss = train_step(net, &mut opt, &crop, weights, cfg.dump_dir.as_deref())?;
            step_losses.push(loss);
            sum += loss;
        }
        let (_, report) = evaluate(net, eval_set, cfg.chunk, eval_seed)?;
        if report.miou > best.2 {
            best = (epoch, net.store.clone(), report.miou);
        }
        log.push(EpochRecord {
            epoch,
            loss: sum / cfg.steps_per_epoch.max(1) as f64,
            report,
        });
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                net.save(&dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
        }
    }
    let result = FitResult {
        log,
        step_losses,
        best_epoch: best.0,
        best: best.1,
        class_weights: weights,
    };
    if let Some(dir) = out {
        net.save(&dir.join("last.ckpt"))?;
        let mut best_net = net.clone();
        best_net.store = result.best.clone();
        best_net.save(&dir.join("best.ckpt"))?;
        fs::write(dir.join("metrics.csv"), result.csv())?;
    }
    Ok(result)
}
