//! Seeded bi-temporal scenes with simulated construction changes.
//!
//! T1 and T2 sample the same base surface independently, so unchanged areas
//! never share points. Change operations act on T2 (and, for removals, put
//! the removed object into T1). Labels live on T2.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::cloud::{Epoch, LabeledPointCloud, Point3};
use crate::config::{parse_list, KvWriter};
use crate::error::{Error, Result};

/// Width of the changed band around a removal footprint, meters.
pub const REMOVAL_BAND: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    /// `z = 0` over `[-ex/2, ex/2] × [-ey/2, ey/2]`.
    Ground,
    /// Floor `z = 0` plus a half-cylinder arch of the given radius around the x axis.
    Tunnel { radius: f64 },
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub min: Point3,
    pub max: Point3,
}

impl Region {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        if (0..3).any(|d| !(min[d] < max[d])) {
            return Err(Error::Validation(format!("region {min:?}..{max:?} is empty")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    /// Euclidean distance from `p` to the box (0 inside).
    pub fn distance(&self, p: &Point3) -> f64 {
        (0..3)
            .map(|d| (self.min[d] - p[d]).max(p[d] - self.max[d]).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Distance from `p` to the box footprint in the xy plane.
    pub fn footprint_distance(&self, p: &Point3) -> f64 {
        (0..2)
            .map(|d| (self.min[d] - p[d]).max(p[d] - self.max[d]).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChangeOp {
    /// New object: points on the visible faces of the box. `points` fixes the
    /// count; otherwise it follows the scene density.
    AddBox { region: Region, points: Option<usize> },
    /// Object present at T1 and gone at T2.
    Remove { region: Region },
    /// `z -= depth` over the box footprint, tapering linearly to 0 over `margin` outside it.
    Subside { region: Region, depth: f64, margin: f64 },
}

impl ChangeOp {
    pub fn region(&self) -> &Region {
        match self {
            ChangeOp::AddBox { region, .. } | ChangeOp::Remove { region } | ChangeOp::Subside { region, .. } => region,
        }
    }
}

fn fmt_region(f: &mut fmt::Formatter<'_>, r: &Region) -> fmt::Result {
    write!(
        f,
        "{},{},{},{},{},{}",
        r.min[0], r.min[1], r.min[2], r.max[0], r.max[1], r.max[2]
    )
}

impl fmt::Display for ChangeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChangeOp::AddBox { region, points } => {
                write!(f, "add:")?;
                fmt_region(f, region)?;
                if let Some(n) = points {
                    write!(f, ",{n}")?;
                }
                Ok(())
            }
            ChangeOp::Remove { region } => {
                write!(f, "remove:")?;
                fmt_region(f, region)
            }
            ChangeOp::Subside { region, depth, margin } => {
                write!(f, "subside:")?;
                fmt_region(f, region)?;
                write!(f, ",{depth},{margin}")
            }
        }
    }
}

impl FromStr for ChangeOp {
    type Err = Error;

    /// `add:x0,y0,z0,x1,y1,z1[,points]`, `remove:x0,..,z1`, `subside:x0,..,z1,depth,margin`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("change op `{s}` lacks a `kind:` prefix")))?;
        let v: Vec<f64> = parse_list("scene.ops", rest)?;
        let bad = || Error::Config(format!("change op `{s}` has the wrong number of values"));
        if v.len() < 6 {
            return Err(bad());
        }
        let region = Region::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]).map_err(|e| Error::Config(e.to_string()))?;
        match (kind, v.len()) {
            ("add", 6) => Ok(ChangeOp::AddBox { region, points: None }),
            ("add", 7) if v[6] >= 0.0 && v[6].fract() == 0.0 => Ok(ChangeOp::AddBox {
                region,
                points: Some(v[6] as usize),
            }),
            ("remove", 6) => Ok(ChangeOp::Remove { region }),
            ("subside", 8) => Ok(ChangeOp::Subside {
                region,
                depth: v[6],
                margin: v[7],
            }),
            ("add" | "remove" | "subside", _) => Err(bad()),
            _ => Err(Error::Config(format!("unknown change op kind `{kind}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub id: String,
    pub surface: Surface,
    /// Ground: x and y size. Tunnel: length along x; the second value is ignored.
    pub extent: [f64; 2],
    /// Points per square meter.
    pub density: f64,
    /// Standard deviation of the noise along the surface normal, meters.
    pub noise: f64,
    pub ops: Vec<ChangeOp>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0) || !self.density.is_finite() {
            return Err(Error::Validation(format!("density {} must be positive", self.density)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Validation(format!("noise {} must be non-negative", self.noise)));
        }
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(Error::Validation(format!("extent {:?} must be positive", self.extent)));
        }
        if let Surface::Tunnel { radius } = self.surface {
            if !(radius > 0.0) {
                return Err(Error::Validation(format!("tunnel radius {radius} must be positive")));
            }
        }
        for op in &self.ops {
            if !self.intersects(op.region()) {
                return Err(Error::Validation(format!("change `{op}` does not touch the surface")));
            }
            if let ChangeOp::Subside { depth, margin, .. } = op {
                if !(*depth > self.noise) {
                    return Err(Error::Validation(format!(
                        "subsidence depth {depth} must exceed the noise {}",
                        self.noise
                    )));
                }
                if !(*margin >= 0.0) {
                    return Err(Error::Validation(format!("subsidence margin {margin} is negative")));
                }
            }
        }
        Ok(())
    }

    fn bounds(&self) -> Region {
        let [ex, ey] = self.extent;
        match self.surface {
            Surface::Ground => Region {
                min: [-ex / 2.0, -ey / 2.0, 0.0],
                max: [ex / 2.0, ey / 2.0, 0.0],
            },
            Surface::Tunnel { radius } => Region {
                min: [-ex / 2.0, -radius, 0.0],
                max: [ex / 2.0, radius, radius],
            },
        }
    }

    fn intersects(&self, r: &Region) -> bool {
        let b = self.bounds();
        (0..3).all(|d| r.min[d] <= b.max[d] && r.max[d] >= b.min[d])
    }

    /// Whether a point lies on the open side of the surface (above ground, inside the tunnel).
    fn visible(&self, p: &Point3) -> bool {
        match self.surface {
            Surface::Ground => p[2] > 0.0,
            Surface::Tunnel { radius } => p[2] > 0.0 && p[1] * p[1] + p[2] * p[2] < radius * radius,
        }
    }
}

/// A noise-free surface sample and its unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: Point3,
    pub normal: Point3,
}

/// Poisson count per 1 m (or smaller, at the border) cell, uniform placement within it.
pub fn resample(surface: Surface, extent: [f64; 2], density: f64, seed: u64) -> Result<Vec<SurfacePoint>> {
    if !(density > 0.0) {
        return Err(Error::Validation(format!("density {density} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let [ex, ey] = extent;
    match surface {
        Surface::Ground => {
            sample_patch(&mut rng, density, [-ex / 2.0, ex / 2.0], [-ey / 2.0, ey / 2.0], &mut out, |u, v| SurfacePoint {
                position: [u, v, 0.0],
                normal: [0.0, 0.0, 1.0],
            })
        }
        Surface::Tunnel { radius } => {
            sample_patch(&mut rng, density, [-ex / 2.0, ex / 2.0], [-radius, radius], &mut out, |u, v| SurfacePoint {
                position: [u, v, 0.0],
                normal: [0.0, 0.0, 1.0],
            });
            // arc length s = radius · θ, θ from 0 (y = +r) to π (y = −r)
            let arc = std::f64::consts::PI * radius;
            sample_patch(&mut rng, density, [-ex / 2.0, ex / 2.0], [0.0, arc], &mut out, |u, s| {
                let theta = s / radius;
                let (sin, cos) = theta.sin_cos();
                SurfacePoint {
                    position: [u, radius * cos, radius * sin],
                    normal: [0.0, -cos, -sin],
                }
            });
        }
    }
    Ok(out)
}

fn sample_patch<R: Rng>(
    rng: &mut R,
    density: f64,
    us: [f64; 2],
    vs: [f64; 2],
    out: &mut Vec<SurfacePoint>,
    map: impl Fn(f64, f64) -> SurfacePoint,
) {
    let cells = |r: [f64; 2]| ((r[1] - r[0]).ceil() as usize).max(1);
    let (nu, nv) = (cells(us), cells(vs));
    for iu in 0..nu {
        let u0 = us[0] + iu as f64;
        let u1 = (u0 + 1.0).min(us[1]);
        for iv in 0..nv {
            let v0 = vs[0] + iv as f64;
            let v1 = (v0 + 1.0).min(vs[1]);
            let area = (u1 - u0) * (v1 - v0);
            if area <= 0.0 {
                continue;
            }
            let count = Poisson::new(density * area).map(|p| p.sample(rng) as usize).unwrap_or(0);
            for _ in 0..count {
                let u = rng.gen_range(u0..u1);
                let v = rng.gen_range(v0..v1);
                out.push(map(u, v));
            }
        }
    }
}

/// Linear taper: 1 inside the footprint, falling to 0 at `margin` outside it.
pub fn subsidence_weight(region: &Region, margin: f64, p: &Point3) -> f64 {
    let d = region.footprint_distance(p);
    if d == 0.0 {
        1.0
    } else if d >= margin {
        0.0
    } else {
        1.0 - d / margin
    }
}

/// Lowers points over the footprint of `region`; returns the cloud and a
/// per-point flag telling whether the point moved.
pub fn apply_subsidence(
    cloud: &LabeledPointCloud,
    region: &Region,
    depth: f64,
    margin: f64,
) -> Result<(LabeledPointCloud, Vec<bool>)> {
    let mut moved = vec![false; cloud.len()];
    let points: Vec<Point3> = cloud
        .points()
        .iter()
        .zip(moved.iter_mut())
        .map(|(p, m)| {
            let shift = depth * subsidence_weight(region, margin, p);
            *m = shift != 0.0;
            [p[0], p[1], p[2] - shift]
        })
        .collect();
    let out = LabeledPointCloud::new(cloud.id.clone(), cloud.epoch, points, cloud.labels().map(<[u8]>::to_vec))?;
    Ok((out, moved))
}

/// Points on the visible faces of `region`, faces chosen by area.
fn sample_box<R: Rng>(spec: &SceneSpec, region: &Region, count: usize, rng: &mut R, noise: &Normal<f64>) -> Result<Vec<Point3>> {
    let size = [
        region.max[0] - region.min[0],
        region.max[1] - region.min[1],
        region.max[2] - region.min[2],
    ];
    // faces as (fixed axis, at max?), area
    let faces: Vec<(usize, bool, f64)> = (0..3)
        .flat_map(|d| {
            let area = size[(d + 1) % 3] * size[(d + 2) % 3];
            [(d, false, area), (d, true, area)]
        })
        .collect();
    let total: f64 = faces.iter().map(|f| f.2).sum();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 + 200 * count {
            return Err(Error::Validation(format!(
                "box {:?}..{:?} has too little visible surface",
                region.min, region.max
            )));
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut face = faces[faces.len() - 1];
        for f in &faces {
            if pick < f.2 {
                face = *f;
                break;
            }
            pick -= f.2;
        }
        let (axis, at_max, _) = face;
        let mut p = [0.0; 3];
        for (d, c) in p.iter_mut().enumerate() {
            *c = if d == axis {
                if at_max {
                    region.max[d]
                } else {
                    region.min[d]
                }
            } else {
                rng.gen_range(region.min[d]..region.max[d])
            };
        }
        // the face is visible if its outward side is open space
        let mut probe = p;
        probe[axis] += if at_max { 1e-9 } else { -1e-9 };
        if spec.visible(&probe) {
            let n = noise.sample(rng);
            p[axis] += if at_max { n } else { -n };
            out.push(p);
        }
    }
    Ok(out)
}

fn box_count(spec: &SceneSpec, region: &Region, points: Option<usize>) -> usize {
    points.unwrap_or_else(|| {
        let s = [
            region.max[0] - region.min[0],
            region.max[1] - region.min[1],
            region.max[2] - region.min[2],
        ];
        let area = 2.0 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2]);
        (area * spec.density).round() as usize
    })
}

fn with_noise(p: &SurfacePoint, n: f64) -> Point3 {
    [
        p.position[0] + n * p.normal[0],
        p.position[1] + n * p.normal[1],
        p.position[2] + n * p.normal[2],
    ]
}

/// A bi-temporal pair: T1 unlabeled, T2 labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub id: String,
    pub t1: LabeledPointCloud,
    pub t2: LabeledPointCloud,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<ScenePair> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let seed_t1 = rng.gen::<u64>();
    let seed_t2 = rng.gen::<u64>();
    let base1 = resample(spec.surface, spec.extent, spec.density, seed_t1)?;
    let base2 = resample(spec.surface, spec.extent, spec.density, seed_t2)?;

    let occluders: Vec<&Region> = spec
        .ops
        .iter()
        .filter_map(|op| match op {
            ChangeOp::AddBox { region, .. } => Some(region),
            _ => None,
        })
        .collect();
    let removed: Vec<&Region> = spec
        .ops
        .iter()
        .filter_map(|op| match op {
            ChangeOp::Remove { region } => Some(region),
            _ => None,
        })
        .collect();

    let mut t1: Vec<Point3> = Vec::with_capacity(base1.len());
    for p in &base1 {
        let n = noise.sample(&mut rng);
        if !removed.iter().any(|r| r.contains(&p.position)) {
            t1.push(with_noise(p, n));
        }
    }
    let mut t2: Vec<Point3> = Vec::with_capacity(base2.len());
    for p in &base2 {
        let n = noise.sample(&mut rng);
        if !occluders.iter().any(|r| r.contains(&p.position)) {
            t2.push(with_noise(p, n));
        }
    }
    let mut labels = vec![0u8; t2.len()];

    for op in &spec.ops {
        match op {
            ChangeOp::Subside { region, depth, margin } => {
                for (p, l) in t2.iter_mut().zip(labels.iter_mut()) {
                    let shift = depth * subsidence_weight(region, *margin, p);
                    if shift != 0.0 {
                        p[2] -= shift;
                        *l = 1;
                    }
                }
            }
            ChangeOp::Remove { region } => {
                let count = box_count(spec, region, None);
                t1.extend(sample_box(spec, region, count, &mut rng, &noise)?);
                for (p, l) in t2.iter().zip(labels.iter_mut()) {
                    if region.distance(p) <= REMOVAL_BAND {
                        *l = 1;
                    }
                }
            }
            ChangeOp::AddBox { region, points } => {
                let count = box_count(spec, region, *points);
                let added = sample_box(spec, region, count, &mut rng, &noise)?;
                labels.extend(std::iter::repeat(1).take(added.len()));
                t2.extend(added);
            }
        }
    }
    if t1.is_empty() || t2.is_empty() {
        return Err(Error::EmptyCloud(format!("scene `{}` has an empty epoch after its changes", spec.id)));
    }
    Ok(ScenePair {
        id: spec.id.clone(),
        t1: LabeledPointCloud::new(format!("{}_t1", spec.id), Epoch::T1, t1, None)?,
        t2: LabeledPointCloud::new(format!("{}_t2", spec.id), Epoch::T2, t2, Some(labels))?,
    })
}

/// The reference scene family: 20 × 20 m ground at 50 points/m², one 8 × 8 m
/// patch subsiding 2 m and one 0.5 × 0.5 × 3 m column added, placed from `seed`.
pub fn fixture(seed: u64) -> SceneSpec {
    let mut spec = SceneSpec {
        id: format!("fixture_{seed}"),
        surface: Surface::Ground,
        extent: [20.0, 20.0],
        density: 50.0,
        noise: 0.02,
        ops: Vec::new(),
        seed,
    };
    spec.ops = random_ops(&spec, seed);
    spec
}

/// One subsidence patch and one added column at seeded, non-overlapping spots.
pub fn random_ops(spec: &SceneSpec, seed: u64) -> Vec<ChangeOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = spec.bounds();
    let patch = 8.0f64.min(0.4 * spec.extent[0].min(spec.extent[1]));
    let margin = 0.1;
    let span = |lo: f64, hi: f64, size: f64, rng: &mut ChaCha8Rng| {
        let (lo, hi) = (lo + 1.0, hi - 1.0 - size);
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo.min(hi)
        }
    };
    let (px, py) = (span(b.min[0], b.max[0], patch, &mut rng), span(b.min[1], b.max[1], patch, &mut rng));
    let sub = Region {
        min: [px, py, -1.0],
        max: [px + patch, py + patch, b.max[2] + 1.0],
    };
    let mut add;
    loop {
        let (bx, by) = (span(b.min[0], b.max[0], 0.5, &mut rng), span(b.min[1], b.max[1], 0.5, &mut rng));
        add = Region {
            min: [bx, by, 0.0],
            max: [bx + 0.5, by + 0.5, 3.0],
        };
        let gap = margin + 1.0;
        let apart = add.max[0] + gap < sub.min[0]
            || add.min[0] > sub.max[0] + gap
            || add.max[1] + gap < sub.min[1]
            || add.min[1] > sub.max[1] + gap;
        if apart {
            break;
        }
    }
    vec![
        ChangeOp::Subside {
            region: sub,
            depth: 2.0,
            margin,
        },
        ChangeOp::AddBox { region: add, points: None },
    ]
}

/// The manifest written next to generated scene files.
pub fn manifest(spec: &SceneSpec) -> String {
    let mut w = KvWriter::default();
    write_spec(spec, &mut w);
    w.finish()
}

pub fn write_spec(spec: &SceneSpec, w: &mut KvWriter) {
    w.put("scene.id", &spec.id);
    match spec.surface {
        Surface::Ground => w.put("scene.surface", "ground"),
        Surface::Tunnel { radius } => {
            w.put("scene.surface", "tunnel");
            w.put("scene.radius", radius);
        }
    }
    w.list("scene.extent", &spec.extent);
    w.put("scene.density", spec.density);
    w.put("scene.noise", spec.noise);
    w.put(
        "scene.ops",
        spec.ops.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"),
    );
    w.put("scene.seed", spec.seed);
}
