//! Labeled point clouds and their ASCII file format.
//!
//! One point per line, `x y z` or `x y z label`, whitespace separated.
//! Lines starting with `#` and blank lines are skipped; CRLF is accepted.
//! Written files use LF and six decimals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Epoch {
    T1,
    T2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    /// `x y z`
    Xyz,
    /// `x y z label`
    Xyzl,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "xyz" => Some(Self::Xyz),
            "xyzl" => Some(Self::Xyzl),
            _ => None,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" | "xyz-ascii" => Ok(Self::Xyz),
            "xyzl" | "xyzl-ascii" => Ok(Self::Xyzl),
            _ => Err(Error::InvalidArgument(format!("unknown cloud format `{s}`"))),
        }
    }
}

/// Points of one epoch, with optional per-point change labels (0 unchanged, 1 changed).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPointCloud {
    pub id: String,
    pub epoch: Epoch,
    points: Vec<Point3>,
    labels: Option<Vec<u8>>,
}

impl LabeledPointCloud {
    pub fn new(id: impl Into<String>, epoch: Epoch, points: Vec<Point3>, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Validation(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::Validation(format!("{} labels for {} points", l.len(), points.len())));
            }
            if let Some(i) = l.iter().position(|&v| v > 1) {
                return Err(Error::Validation(format!("label {} at point {i} is not 0 or 1", l[i])));
            }
        }
        Ok(Self {
            id: id.into(),
            epoch,
            points,
            labels,
        })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        self.labels = Some(labels);
        Self::new(self.id, self.epoch, self.points, self.labels)
    }

    /// Sub-cloud of the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            epoch: self.epoch,
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn format(&self) -> CloudFormat {
        if self.labels.is_some() {
            CloudFormat::Xyzl
        } else {
            CloudFormat::Xyz
        }
    }
}

pub fn parse_cloud(text: &str, format: CloudFormat, id: &str, epoch: Epoch) -> Result<LabeledPointCloud> {
    let want = match format {
        CloudFormat::Xyz => 3,
        CloudFormat::Xyzl => 4,
    };
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (n, raw) in text.split('\n').enumerate() {
        let line_no = n + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != want {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {want} fields, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (c, f) in p.iter_mut().zip(&fields) {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{f}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite coordinate `{f}`"),
                });
            }
            *c = v;
        }
        points.push(p);
        if want == 4 {
            let l = match fields[3] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Validation(format!("line {line_no}: label `{other}` is not 0 or 1")));
                }
            };
            labels.push(l);
        }
    }
    let labels = (want == 4).then_some(labels);
    LabeledPointCloud::new(id, epoch, points, labels)
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat, epoch: Epoch) -> Result<LabeledPointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
    parse_cloud(&text, format, id, epoch)
}

/// Serializes as `.xyz` or, when labels are present, `.xyzl`.
pub fn format_cloud(cloud: &LabeledPointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 32);
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(out, "{:.6} {:.6} {:.6}", p[0], p[1], p[2]);
        if let Some(l) = cloud.labels() {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn save_cloud(cloud: &LabeledPointCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_cloud(cloud))?;
    Ok(())
}
