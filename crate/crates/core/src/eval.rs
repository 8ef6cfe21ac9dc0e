//! Confusion counts, the two-class macro metrics, and the C2C baseline.

use std::fmt::Write as _;

use crate::cloud::{LabeledPointCloud, Point3};
use crate::config::KvWriter;
use crate::error::{Error, Result};
use crate::index::SpatialIndex;

/// Two-class counts; "changed" (label 1) is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::Validation(format!("label pair ({p}, {t}) is outside {{0,1}}"))),
        }
    }
    Ok(c)
}

/// All values in percent. Macro means average the changed and unchanged classes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub oa: f64,
    pub mrecall: f64,
    pub mprecision: f64,
    pub mf1: f64,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
    /// Per-class ratios whose denominator was zero; each counted as 0.
    pub undefined: Vec<&'static str>,
}

fn ratio(num: u64, den: u64, name: &'static str, undefined: &mut Vec<&'static str>) -> f64 {
    if den == 0 {
        undefined.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionMatrix) -> Result<MetricReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Validation("confusion matrix is empty".into()));
    }
    let mut und = Vec::new();
    let u = &mut und;
    let recall = [
        ratio(c.tp, c.tp + c.fn_, "changed.recall", u),
        ratio(c.tn, c.tn + c.fp, "unchanged.recall", u),
    ];
    let precision = [
        ratio(c.tp, c.tp + c.fp, "changed.precision", u),
        ratio(c.tn, c.tn + c.fn_, "unchanged.precision", u),
    ];
    let f1 = [
        ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "changed.f1", u),
        ratio(2 * c.tn, 2 * c.tn + c.fp + c.fn_, "unchanged.f1", u),
    ];
    let iou = [
        ratio(c.tp, c.tp + c.fp + c.fn_, "changed.iou", u),
        ratio(c.tn, c.tn + c.fp + c.fn_, "unchanged.iou", u),
    ];
    let mean = |v: [f64; 2]| 50.0 * (v[0] + v[1]);
    Ok(MetricReport {
        oa: 100.0 * (c.tp + c.tn) as f64 / total as f64,
        mrecall: mean(recall),
        mprecision: mean(precision),
        mf1: mean(f1),
        miou: mean(iou),
        confusion: *c,
        undefined: und,
    })
}

impl MetricReport {
    /// Aligned table in the column order OA, mrecall, mprecision, mf1score, mIoU.
    pub fn table(&self) -> String {
        let head = ["OA", "mrecall", "mprecision", "mf1score", "mIoU"];
        let vals = [self.oa, self.mrecall, self.mprecision, self.mf1, self.miou];
        let mut out = String::new();
        for h in head {
            let _ = write!(out, "{h:>12}");
        }
        out.push('\n');
        for v in vals {
            let _ = write!(out, "{v:>12.2}");
        }
        out.push('\n');
        out
    }

    pub fn key_values(&self) -> String {
        let mut w = KvWriter::default();
        w.put("oa", format!("{:.2}", self.oa));
        w.put("mrecall", format!("{:.2}", self.mrecall));
        w.put("mprecision", format!("{:.2}", self.mprecision));
        w.put("mf1score", format!("{:.2}", self.mf1));
        w.put("miou", format!("{:.2}", self.miou));
        w.put("tp", self.confusion.tp);
        w.put("tn", self.confusion.tn);
        w.put("fp", self.confusion.fp);
        w.put("fn", self.confusion.fn_);
        w.put("undefined", self.undefined.join(","));
        w.finish()
    }
}

/// Distance from every T2 point to its nearest T1 point.
pub fn c2c_distances(t1: &LabeledPointCloud, t2: &LabeledPointCloud) -> Result<Vec<f64>> {
    if t2.is_empty() {
        return Err(Error::EmptyCloud(format!("`{}` has no points", t2.id)));
    }
    let index = SpatialIndex::build(t1)?;
    Ok(index.knn_batch(t2.points(), 1).into_iter().map(|n| n.sq_dists[0].sqrt()).collect())
}

/// Labels a T2 point changed when its nearest T1 point is farther than `threshold`.
pub fn c2c_baseline(t1: &LabeledPointCloud, t2: &LabeledPointCloud, threshold: f64) -> Result<Vec<u8>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be positive")));
    }
    Ok(threshold_distances(&c2c_distances(t1, t2)?, threshold))
}

pub fn threshold_distances(distances: &[f64], threshold: f64) -> Vec<u8> {
    distances.iter().map(|&d| u8::from(d > threshold)).collect()
}

/// Candidate thresholds searched by [`best_threshold`]: 400 log-spaced values from 1 mm to 10 m.
pub fn threshold_grid() -> Vec<f64> {
    let n = 400;
    (0..n)
        .map(|i| 1e-3 * 10f64.powf(4.0 * i as f64 / (n - 1) as f64))
        .collect()
}

/// The grid threshold with the highest pooled mIoU over `(distances, truth)` pairs;
/// the lowest such threshold on ties.
pub fn best_threshold(scenes: &[(Vec<f64>, Vec<u8>)]) -> Result<(f64, MetricReport)> {
    let mut best: Option<(f64, MetricReport)> = None;
    for t in threshold_grid() {
        let mut c = ConfusionMatrix::default();
        for (d, truth) in scenes {
            c.merge(&confusion(&threshold_distances(d, t), truth)?);
        }
        let r = metrics(&c)?;
        if best.as_ref().map_or(true, |(_, b)| r.miou > b.miou) {
            best = Some((t, r));
        }
    }
    best.ok_or_else(|| Error::Validation("no scenes to calibrate on".into()))
}

/// Outcome of one point against the truth and the color used to draw it.
pub fn outcome_color(pred: u8, truth: u8) -> (&'static str, [u8; 3]) {
    match (pred, truth) {
        (1, 1) => ("TP", [255, 0, 0]),
        (0, 0) => ("TN", [128, 0, 128]),
        (0, _) => ("FN", [0, 0, 255]),
        _ => ("FP", [255, 255, 0]),
    }
}

/// Lines of `x y z pred r g b`: true positives red, true negatives purple,
/// false negatives blue, false positives yellow.
pub fn color_export(points: &[Point3], pred: &[u8], truth: &[u8]) -> Result<String> {
    if points.len() != pred.len() || pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} points, {} predictions, {} labels",
            points.len(),
            pred.len(),
            truth.len()
        )));
    }
    let mut out = String::with_capacity(points.len() * 48);
    for ((p, &y), &t) in points.iter().zip(pred).zip(truth) {
        let (_, [r, g, b]) = outcome_color(y, t);
        let _ = writeln!(out, "{:.6} {:.6} {:.6} {y} {r} {g} {b}", p[0], p[1], p[2]);
    }
    Ok(out)
}
