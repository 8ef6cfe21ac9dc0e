//! Flat `key = value` configuration shared by every subcommand.
//!
//! Keys are sectioned by prefix (`scene.*`, `train.*`, `net.*`). Blank lines
//! and `#` comments are ignored; unknown keys are errors.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::synthgen::{fixture, random_ops, write_spec, ChangeOp, SceneSpec, Surface};
use crate::training::TrainConfig;

/// `(line number, key, value)` for every assignment in `text`.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((n + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Comma-separated values.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{}`", s.trim())))
        })
        .collect()
}

/// Accumulates `key = value` lines in insertion order.
#[derive(Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn put(&mut self, key: &str, value: impl Display) {
        self.out.push_str(&format!("{key} = {value}\n"));
    }

    pub fn list<T: Display>(&mut self, key: &str, values: &[T]) {
        let joined: Vec<String> = values.iter().map(ToString::to_string).collect();
        self.put(key, joined.join(","));
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// How `synth` builds its scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Surface, extent, density, noise and seed shared by all scenes.
    pub base: SceneSpec,
    /// Draw one subsidence patch and one box per scene from its seed instead
    /// of using `base.ops`.
    pub random_ops: bool,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mut base = fixture(7);
        base.ops.clear();
        base.id = "scene".into();
        Self {
            base,
            random_ops: true,
            train_scenes: 1,
            test_scenes: 0,
        }
    }
}

impl SynthConfig {
    /// Scene `i` uses seed `base.seed + i`; test scenes follow the train scenes.
    pub fn scene_specs(&self) -> Vec<(bool, SceneSpec)> {
        (0..self.train_scenes + self.test_scenes)
            .map(|i| {
                let mut spec = self.base.clone();
                spec.seed = self.base.seed.wrapping_add(i as u64);
                spec.id = format!("scene_{i:03}");
                if self.random_ops {
                    spec.ops = random_ops(&spec, spec.seed);
                }
                (i < self.train_scenes, spec)
            })
            .collect()
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("scene.preset", if self.random_ops { "random" } else { "fixed" });
        let mut spec = self.base.clone();
        if self.random_ops {
            spec.ops.clear();
        }
        write_spec(&spec, w);
        w.put("scene.train_scenes", self.train_scenes);
        w.put("scene.test_scenes", self.test_scenes);
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("`{key}`: cannot parse `{value}`"));
        let float = |v: &str| v.parse::<f64>().map_err(|_| bad());
        match key {
            "scene.preset" => {
                self.random_ops = match value {
                    "random" => true,
                    "fixed" => false,
                    _ => return Err(Error::Config(format!("`{key}` is `random` or `fixed`, not `{value}`"))),
                }
            }
            "scene.id" => self.base.id = value.to_string(),
            "scene.surface" => {
                self.base.surface = match value {
                    "ground" => Surface::Ground,
                    "tunnel" => Surface::Tunnel {
                        radius: match self.base.surface {
                            Surface::Tunnel { radius } => radius,
                            Surface::Ground => 3.0,
                        },
                    },
                    _ => return Err(Error::Config(format!("`{key}` is `ground` or `tunnel`, not `{value}`"))),
                }
            }
            "scene.radius" => {
                let r = float(value)?;
                match &mut self.base.surface {
                    Surface::Tunnel { radius } => *radius = r,
                    Surface::Ground => return Err(Error::Config("`scene.radius` needs `scene.surface = tunnel` first".into())),
                }
            }
            "scene.extent" => {
                let v: Vec<f64> = parse_list(key, value)?;
                match v[..] {
                    [a, b] => self.base.extent = [a, b],
                    _ => return Err(Error::Config(format!("`{key}` needs two values"))),
                }
            }
            "scene.density" => self.base.density = float(value)?,
            "scene.noise" => self.base.noise = float(value)?,
            "scene.ops" => {
                self.base.ops = value
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(ChangeOp::from_str)
                    .collect::<Result<_>>()?
            }
            "scene.seed" => self.base.seed = value.parse().map_err(|_| bad())?,
            "scene.train_scenes" => self.train_scenes = value.parse().map_err(|_| bad())?,
            "scene.test_scenes" => self.test_scenes = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub scene: SynthConfig,
    pub train: TrainConfig,
    pub net: NetConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in parse_kv(text)? {
            let known = cfg.scene.set(&key, &value)? || cfg.train.set(&key, &value)? || cfg.net.set(&key, &value)?;
            if !known {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        cfg.train.validate()?;
        cfg.net.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> String {
        let mut w = KvWriter::default();
        self.scene.write_kv(&mut w);
        self.train.write_kv(&mut w);
        self.net.write_kv(&mut w);
        w.finish()
    }
}
