//! Dataset directories: `manifest.json`, `scenes/NNNNN/` and the parallel
//! `noisy_labels/NNNNN.png` set.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{GenerateConfig, LabelSet, RunConfig};
use crate::error::{Error, Result};
use crate::scene::{corrupt_boundaries, generate_scene, Label, PlanarScene};
use crate::scene_io::{self, load_labels_png, read_json, save_labels_png, save_scene, scene_dir, write_json};

pub const MANIFEST: &str = "manifest.json";
pub const INCOMPLETE: &str = "INCOMPLETE";
pub const NOISY_DIR: &str = "noisy_labels";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub generate: GenerateConfig,
    pub config_hash: String,
    pub scene_seeds: Vec<u64>,
}

impl DatasetManifest {
    /// Hash of the manifest itself; identifies the dataset in reports.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("serialisable")))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed of scene `i` under base seed `base` (SplitMix64 step).
pub fn scene_seed(base: u64, i: usize) -> u64 {
    let mut z = base
        .wrapping_add((i as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn noisy_label_path(root: &Path, i: usize) -> PathBuf {
    root.join(NOISY_DIR).join(format!("{i:05}.png"))
}

/// Writes `cfg.num_scenes` scenes and, when the radius is positive, their
/// corrupted label maps. An `INCOMPLETE` marker exists until the last file is
/// written.
pub fn generate_dataset(root: &Path, seed: u64, cfg: &GenerateConfig) -> Result<DatasetManifest> {
    cfg.scene.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let marker = root.join(INCOMPLETE);
    fs::write(&marker, b"generation in progress\n").map_err(|e| Error::io(&marker, e))?;
    let scene_seeds: Vec<u64> = (0..cfg.num_scenes).map(|i| scene_seed(seed, i)).collect();
    if cfg.corruption_radius > 0 {
        let d = root.join(NOISY_DIR);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, &s) in scene_seeds.iter().enumerate() {
        let scene = generate_scene(s, &cfg.scene)?;
        save_scene(&scene, &scene_dir(root, i))?;
        if cfg.corruption_radius > 0 {
            let noisy = corrupt_boundaries(&scene.labels, cfg.corruption_radius, s)?;
            save_labels_png(&noisy, &noisy_label_path(root, i))?;
        }
        log::debug!("scene {i} written (seed {s})");
    }
    let config_hash = hex(&Sha256::digest(serde_json::to_vec(cfg)?));
    let manifest = DatasetManifest {
        format_version: scene_io::FORMAT_VERSION,
        seed,
        generate: cfg.clone(),
        config_hash,
        scene_seeds,
    };
    write_json(&manifest, &root.join(MANIFEST))?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(manifest)
}

/// Validates the whole run config, then generates into `cfg.dataset`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    generate_dataset(&cfg.dataset, cfg.seed, &cfg.generate)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    if root.join(INCOMPLETE).exists() {
        return Err(Error::Precondition(format!(
            "{} is marked incomplete; regenerate it",
            root.display()
        )));
    }
    let m: DatasetManifest = read_json(&root.join(MANIFEST))?;
    if m.format_version != scene_io::FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported dataset format_version {}",
            root.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// A scene together with the label set chosen for this use.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub scene: PlanarScene,
    pub labels: Array2<Label>,
}

pub fn load_sample(root: &Path, index: usize, labels: LabelSet) -> Result<Sample> {
    let scene = scene_io::load_scene(&scene_dir(root, index))?;
    let labels = match labels {
        LabelSet::Clean => scene.labels.clone(),
        LabelSet::Corrupted => {
            let p = noisy_label_path(root, index);
            if !p.exists() {
                return Err(Error::Precondition(format!(
                    "{} missing; generate with corruption_radius > 0",
                    p.display()
                )));
            }
            let l = load_labels_png(&p)?;
            if l.dim() != scene.labels.dim() {
                return Err(Error::Format(format!("{}: size mismatch", p.display())));
            }
            l
        }
    };
    Ok(Sample { index, scene, labels })
}

/// Train indices `[0, n - eval)` and eval indices `[n - eval, n)`.
pub fn split(n: usize, eval: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if eval == 0 || eval >= n {
        return Err(Error::Config(format!(
            "eval_scenes = {eval} must lie in 1..{n} for a dataset of {n} scenes"
        )));
    }
    Ok(((0..n - eval).collect(), (n - eval..n).collect()))
}
