//! Run configuration: JSON file, dotted-path overrides and the `XPD_SEED`
//! environment override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{config_err, Error, Result};
use crate::losses::LossConfig;
use crate::metrics::BoundaryIouConfig;
use crate::net::{DecodeConfig, NetConfig};
use crate::scene::SceneConfig;

pub const SEED_ENV: &str = "XPD_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSet {
    #[default]
    Clean,
    Corrupted,
}

impl std::fmt::Display for LabelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelSet::Clean => "clean",
            LabelSet::Corrupted => "corrupted",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub num_scenes: usize,
    pub scene: SceneConfig,
    /// Radius of the noisy label set in full-resolution pixels; 0 skips it.
    pub corruption_radius: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            num_scenes: 512,
            scene: SceneConfig::default(),
            corruption_radius: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    /// Maximum relative brightness change.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: 0.5,
            vflip: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            noise_sigma: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hflip: 0.0,
            vflip: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First epoch (0-based) trained at `lr * decay_factor`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_epoch: Some(15),
            decay_factor: 0.1,
            clip_norm: Some(10.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub generate: GenerateConfig,
    /// Scenes held out at the end of the dataset for evaluation.
    pub eval_scenes: usize,
    pub train_labels: LabelSet,
    pub eval_labels: LabelSet,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub boundary_iou: BoundaryIouConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("dataset"),
            output_dir: PathBuf::from("out"),
            seed: 0,
            generate: GenerateConfig::default(),
            eval_scenes: 64,
            train_labels: LabelSet::Corrupted,
            eval_labels: LabelSet::Clean,
            net: NetConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
            boundary_iou: BoundaryIouConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            epochs: 20,
            batch_size: 8,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(config_err!("{name} must lie in [0, 1], got {v}"));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.generate.scene.validate()?;
        self.net.validate()?;
        self.loss.weights.validate()?;
        self.decode.validate()?;
        let s = &self.generate.scene;
        if s.height % crate::net::GRID_STRIDE != 0 || s.width % crate::net::GRID_STRIDE != 0 {
            return Err(config_err!(
                "image size {}x{} must be divisible by {}",
                s.height,
                s.width,
                crate::net::GRID_STRIDE
            ));
        }
        if 2 * self.generate.corruption_radius > s.height.min(s.width) {
            return Err(config_err!("corruption_radius too large for {}x{}", s.height, s.width));
        }
        if self.generate.num_scenes == 0 {
            return Err(config_err!("generate.num_scenes must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(config_err!("invalid optimiser settings {o:?}"));
        }
        if !(o.decay_factor > 0.0) || o.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(config_err!("decay_factor and clip_norm must be positive"));
        }
        let a = &self.augment;
        unit("augment.hflip", a.hflip)?;
        unit("augment.vflip", a.vflip)?;
        unit("augment.brightness", a.brightness)?;
        unit("augment.contrast", a.contrast)?;
        if !(a.noise_sigma >= 0.0) {
            return Err(config_err!("augment.noise_sigma must be non-negative"));
        }
        unit("boundary_iou.match_iou", self.boundary_iou.match_iou)?;
        Ok(())
    }

    /// Reads a JSON file, applies `key.path=value` overrides and then
    /// `XPD_SEED`, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let seed_env = std::env::var(SEED_ENV).ok();
        Self::resolve(path, overrides, seed_env.as_deref())
    }

    pub fn resolve(path: Option<&Path>, overrides: &[String], seed_env: Option<&str>) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| config_err!("{}: {e}", p.display()))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(s) = seed_env {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| config_err!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
            value["seed"] = Value::from(seed);
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise. Every path segment must exist,
/// except the last one of an optional field.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err!("override {spec:?} is not key=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err!("override path {path:?} has an empty segment"));
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err!("override {path:?}: {} is not an object", keys[..i].join(".")))?;
        if i + 1 == keys.len() {
            if !obj.contains_key(*k) {
                return Err(config_err!("override {path:?}: unknown key {k:?}"));
            }
            obj.insert(k.to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .get_mut(*k)
            .ok_or_else(|| config_err!("override {path:?}: unknown key {k:?}"))?;
    }
    unreachable!("split yields at least one segment")
}
