//! Siamese encoder-decoder for bi-temporal change detection.
//!
//! Both epochs run through one shared encoder (set abstraction by FPS and
//! coordinate KNN, edge-conv embedding, self-transformer over a dynamic
//! graph). At every level the two branches exchange information through
//! cross-transformers, and each T2 point retrieves the feature of its nearest
//! T1 point to form a difference. The decoder interpolates top-down on the
//! T2 pyramid, concatenating the fused T2 features and the differences at
//! every scale, and a small head emits two logits per T2 point.
//!
//! Coordinates enter as given; callers center crops before the forward pass.

use std::fs;
use std::path::{Path, PathBuf};

use cdnet_autodiff::checkpoint::{load_params, save_params};
use cdnet_autodiff::{Linear, Mlp2, ParamStore, Precision, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_transformer_layer, self_transformer_layer, AttentionParams, EdgeConv};
use crate::cloud::Point3;
use crate::config::{parse_list, KvWriter};
use crate::error::{Error, Result};
use crate::fps::{fps_indices, FpsStart};
use crate::index::SpatialIndex;

const IDW_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Downsampling ratio of each encoder level.
    pub ratios: Vec<usize>,
    /// Output width of each encoder level.
    pub channels: Vec<usize>,
    /// Grouping and self-attention neighborhood size.
    pub k: usize,
    pub cross_k: usize,
    /// Neighbors averaged when retrieving the corresponding T1 feature.
    pub diff_k: usize,
    /// Decoder widths, coarsest first; one more entry than there are levels.
    pub decoder: Vec<usize>,
    pub head_hidden: usize,
    pub min_points: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            ratios: vec![4, 4, 2, 2],
            channels: vec![32, 64, 128, 256],
            k: 16,
            cross_k: 16,
            diff_k: 1,
            decoder: vec![256, 128, 64, 32, 32],
            head_hidden: 32,
            min_points: 1,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.ratios.len();
        if levels == 0 || self.channels.len() != levels || self.decoder.len() != levels + 1 {
            return Err(Error::Config(format!(
                "net: {} ratios, {} channels and {} decoder widths do not describe one pyramid",
                levels,
                self.channels.len(),
                self.decoder.len()
            )));
        }
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("net.{name} must be positive")))
            } else {
                Ok(())
            }
        };
        for &r in &self.ratios {
            positive("ratios", r)?;
        }
        for &c in self.channels.iter().chain(&self.decoder) {
            positive("channels", c)?;
        }
        positive("k", self.k)?;
        positive("cross_k", self.cross_k)?;
        positive("diff_k", self.diff_k)?;
        positive("head_hidden", self.head_hidden)?;
        positive("min_points", self.min_points)
    }

    /// Point count at every level for an input of `n` points, input level first.
    pub fn level_sizes(&self, n: usize) -> Vec<usize> {
        let mut sizes = vec![n];
        for &r in &self.ratios {
            let last = *sizes.last().expect("non-empty");
            sizes.push(last.div_ceil(r).max(1));
        }
        sizes
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.list("net.ratios", &self.ratios);
        w.list("net.channels", &self.channels);
        w.put("net.k", self.k);
        w.put("net.cross_k", self.cross_k);
        w.put("net.diff_k", self.diff_k);
        w.list("net.decoder", &self.decoder);
        w.put("net.head_hidden", self.head_hidden);
        w.put("net.min_points", self.min_points);
        w.put("net.seed", self.seed);
    }

    /// Applies one `net.*` key; returns false for keys outside this section.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a non-negative integer")))
        };
        match key {
            "net.ratios" => self.ratios = parse_list(key, value)?,
            "net.channels" => self.channels = parse_list(key, value)?,
            "net.k" => self.k = num(value)?,
            "net.cross_k" => self.cross_k = num(value)?,
            "net.diff_k" => self.diff_k = num(value)?,
            "net.decoder" => self.decoder = parse_list(key, value)?,
            "net.head_hidden" => self.head_hidden = num(value)?,
            "net.min_points" => self.min_points = num(value)?,
            "net.seed" => self.seed = value.parse().map_err(|_| Error::Config(format!("`{key}`: bad seed `{value}`")))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLevel {
    pub ratio: usize,
    pub k: usize,
    pub width: usize,
    pub edge: EdgeConv,
    pub attention: AttentionParams,
}

#[derive(Clone, Debug)]
pub struct ChangeNetWeights {
    /// One encoder, used by both branches.
    pub encoder: Vec<EncoderLevel>,
    pub cross: Vec<AttentionParams>,
    /// Coarsest first.
    pub decoder: Vec<Linear>,
    pub head: Mlp2,
}

/// One level of an encoded cloud. Level 0 is the input itself.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub coords: Vec<Point3>,
    pub features: Var,
    /// Index of each point in the previous level (identity at level 0).
    pub provenance: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: Vec<PyramidLevel>,
}

#[derive(Clone, Debug)]
pub struct ChangeNet {
    pub config: NetConfig,
    pub store: ParamStore,
    pub weights: ChangeNetWeights,
}

impl ChangeNet {
    /// Fresh weights drawn from ChaCha8 seeded with `config.seed`.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut encoder = Vec::new();
        let mut in_dim = 3;
        for (l, (&ratio, &width)) in config.ratios.iter().zip(&config.channels).enumerate() {
            let edge = EdgeConv::new(&mut store, &format!("encoder.{l}.edge"), in_dim, width, &mut rng)?;
            let attention = AttentionParams::new(&mut store, &format!("encoder.{l}.attn"), width, &mut rng)?;
            encoder.push(EncoderLevel {
                ratio,
                k: config.k,
                width,
                edge,
                attention,
            });
            in_dim = width;
        }
        let mut cross = Vec::new();
        for (l, &width) in config.channels.iter().enumerate() {
            cross.push(AttentionParams::new(&mut store, &format!("cross.{l}"), width, &mut rng)?);
        }
        let skip_widths: Vec<usize> = std::iter::once(3).chain(config.channels.iter().copied()).map(|c| 2 * c).collect();
        let levels = config.ratios.len();
        let mut decoder = Vec::new();
        for (i, &out) in config.decoder.iter().enumerate() {
            let level = levels - i;
            let in_dim = skip_widths[level] + if i == 0 { 0 } else { config.decoder[i - 1] };
            decoder.push(Linear::new(&mut store, &format!("decoder.{level}"), in_dim, out, &mut rng)?);
        }
        let last = *config.decoder.last().expect("validated");
        let head = Mlp2::new(&mut store, "head", last, config.head_hidden, 2, &mut rng)?;
        Ok(Self {
            config,
            store,
            weights: ChangeNetWeights {
                encoder,
                cross,
                decoder,
                head,
            },
        })
    }

    pub fn levels(&self) -> usize {
        self.weights.encoder.len()
    }

    /// Runs the shared encoder on one cloud.
    pub fn encode(&self, s: &mut Session<'_>, coords: &[Point3]) -> Result<PyramidFeatures> {
        if coords.is_empty() {
            return Err(Error::EmptyCloud("encoder input".into()));
        }
        if coords.len() < self.config.min_points {
            return Err(Error::TooSmall {
                n: coords.len(),
                min: self.config.min_points,
            });
        }
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        let x0 = s.constant(Tensor::new(vec![coords.len(), 3], flat)?);
        let mut levels = vec![PyramidLevel {
            coords: coords.to_vec(),
            features: x0,
            provenance: (0..coords.len()).collect(),
        }];
        for level in &self.weights.encoder {
            let prev = levels.last().expect("non-empty");
            let m = prev.coords.len().div_ceil(level.ratio).max(1);
            let prev_coords = prev.coords.clone();
            let prev_feats = prev.features;
            let centers = s.select(|_| fps_indices(&prev_coords, m, FpsStart::LowestCoordinate).expect("1 <= m <= n"))?;
            let sampled: Vec<Point3> = centers.iter().map(|&i| prev_coords[i]).collect();
            let index = SpatialIndex::from_points("level", prev_coords)?;
            let groups = s.select(|_| index.knn_indices(&sampled, level.k))?;
            let embedded = level.edge.forward(s, prev_feats, &centers, &groups, level.k)?;
            let attended = self_transformer_layer(s, embedded, &sampled, level.k, &level.attention)?;
            levels.push(PyramidLevel {
                coords: sampled,
                features: attended.output,
                provenance: centers,
            });
        }
        Ok(PyramidFeatures { levels })
    }

    /// Full pass; returns `N_T2 × 2` logits.
    pub fn forward(&self, s: &mut Session<'_>, t1: &[Point3], t2: &[Point3]) -> Result<Var> {
        let p1 = self.encode(s, t1)?;
        let p2 = self.encode(s, t2)?;
        let mut skips = Vec::with_capacity(p2.levels.len());
        for (l, (a, b)) in p2.levels.iter().zip(&p1.levels).enumerate() {
            let (fa, fb) = if l == 0 {
                (a.features, b.features)
            } else {
                fuse_cross(s, a, b, &self.weights.cross[l - 1], self.config.cross_k)?
            };
            let d = feature_difference(s, fa, &a.coords, fb, &b.coords, self.config.diff_k)?;
            skips.push(s.graph.concat(&[fa, d], 1)?);
        }
        let h = self.decode(s, &p2, &skips)?;
        self.weights.head.forward(s, h).map_err(Error::from)
    }

    /// Top-down feature propagation over `pyramid`; `skips[l]` holds the
    /// skip features of level `l`. Returns the finest decoder features.
    pub fn decode(&self, s: &mut Session<'_>, pyramid: &PyramidFeatures, skips: &[Var]) -> Result<Var> {
        let levels = pyramid.levels.len();
        if skips.len() != levels {
            return Err(Error::InvalidArgument(format!("decode: {} skip tensors for {levels} levels", skips.len())));
        }
        let mut h: Option<Var> = None;
        for (i, lin) in self.weights.decoder.iter().enumerate() {
            let l = levels - 1 - i;
            let input = match h {
                None => skips[l],
                Some(prev) => {
                    let up = interpolate(s, prev, &pyramid.levels[l + 1].coords, &pyramid.levels[l].coords)?;
                    s.graph.concat(&[up, skips[l]], 1)?
                }
            };
            let z = lin.forward(s, input)?;
            h = Some(s.graph.relu(z)?);
        }
        Ok(h.expect("decoder has layers"))
    }

    /// Inference without gradients; logits for every T2 point.
    pub fn predict(&self, t1: &[Point3], t2: &[Point3], precision: Precision) -> Result<Tensor> {
        let mut s = Session::inference(&self.store, precision);
        let logits = self.forward(&mut s, t1, t2)?;
        Ok(s.value(logits).clone())
    }

    /// Writes the checkpoint to `path` and the architecture manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(&self.store, path)?;
        fs::write(manifest_path(path), self.manifest())?;
        Ok(())
    }

    pub fn manifest(&self) -> String {
        let mut w = KvWriter::default();
        w.put("format", "cdnet-checkpoint-1");
        self.config.write_kv(&mut w);
        w.put("params", self.store.len());
        w.put("scalars", self.store.numel());
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path(path))?;
        let mut config = NetConfig::default();
        for (line, key, value) in crate::config::parse_kv(&text)? {
            match key.as_str() {
                "format" | "params" | "scalars" => {}
                _ => {
                    if !config.set(&key, &value)? {
                        return Err(Error::Config(format!("manifest line {line}: unknown key `{key}`")));
                    }
                }
            }
        }
        let mut net = Self::new(config)?;
        let stored = load_params(path)?;
        net.store.assign_from(&stored)?;
        Ok(net)
    }
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest");
    checkpoint.with_file_name(name)
}

/// Cross-transformer in both directions with one parameter set.
pub fn fuse_cross(
    s: &mut Session<'_>,
    a: &PyramidLevel,
    b: &PyramidLevel,
    p: &AttentionParams,
    k: usize,
) -> Result<(Var, Var)> {
    let fa = cross_transformer_layer(s, a.features, &a.coords, b.features, &b.coords, k, p)?;
    let fb = cross_transformer_layer(s, b.features, &b.coords, a.features, &a.coords, k, p)?;
    Ok((fa.output, fb.output))
}

/// `feat_a(i) − mean of feat_b over the k points of B nearest to a_i`.
pub fn feature_difference(
    s: &mut Session<'_>,
    feat_a: Var,
    coords_a: &[Point3],
    feat_b: Var,
    coords_b: &[Point3],
    k: usize,
) -> Result<Var> {
    if coords_a.is_empty() || coords_b.is_empty() {
        return Err(Error::EmptyCloud("feature difference needs both levels non-empty".into()));
    }
    let index = SpatialIndex::from_points("diff", coords_b.to_vec())?;
    let nbr = s.select(|_| index.knn_indices(coords_a, k))?;
    let g = s.graph.gather(feat_b, nbr.into())?;
    let matched = if k == 1 {
        g
    } else {
        let c = s.graph.shape(feat_b)[1];
        let g = s.graph.reshape(g, vec![coords_a.len(), k, c])?;
        s.graph.mean(g, 1)?
    };
    Ok(s.graph.sub(feat_a, matched)?)
}

/// Row-stochastic `fine × coarse` matrix of inverse-distance weights over the
/// 3 nearest coarse points. A fine point that coincides with a coarse point
/// takes that point's feature exactly; repeated neighbors (fewer than 3
/// coarse points) count once.
pub fn idw_weights(coarse: &[Point3], fine: &[Point3]) -> Result<Tensor> {
    let index = SpatialIndex::from_points("coarse", coarse.to_vec())?;
    let nc = coarse.len();
    let mut w = vec![0.0; fine.len() * nc];
    for (i, n) in index.knn_batch(fine, 3).into_iter().enumerate() {
        let row = &mut w[i * nc..(i + 1) * nc];
        if n.sq_dists[0] == 0.0 {
            row[n.indices[0]] = 1.0;
            continue;
        }
        let mut total = 0.0;
        for (t, (&j, &d)) in n.indices.iter().zip(&n.sq_dists).enumerate() {
            if n.indices[..t].contains(&j) {
                continue;
            }
            let v = 1.0 / (d + IDW_EPS);
            row[j] = v;
            total += v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::new(vec![fine.len(), nc], w)?)
}

pub fn interpolate(s: &mut Session<'_>, coarse_feats: Var, coarse: &[Point3], fine: &[Point3]) -> Result<Var> {
    let w = idw_weights(coarse, fine)?;
    let w = s.constant(w);
    Ok(s.graph.matmul(w, coarse_feats)?)
}
