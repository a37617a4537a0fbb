//! Checkpoint archives: a tar holding `manifest.json` and one little-endian
//! `f64` blob per parameter under `params/`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::Variant;
use crate::error::{Error, Result};
use crate::net::{NetConfig, XpdNet};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub arch_hash: String,
    pub variant: Variant,
    pub backbone_channels: [usize; 3],
    pub mask_channels: usize,
    pub depth_channels: usize,
    pub head_channels: usize,
    /// Where the depth-side distillation hook sits.
    pub depth_hook: String,
    pub epoch: usize,
    pub net: NetConfig,
    pub tensors: Vec<TensorEntry>,
}

fn blob_name(i: usize) -> String {
    format!("params/{i:04}.bin")
}

fn tar_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn save_checkpoint(net: &XpdNet, epoch: usize, path: &Path) -> Result<()> {
    let c = &net.config;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        arch_hash: c.arch_hash(),
        variant: c.variant,
        backbone_channels: c.backbone_channels,
        mask_channels: c.mask_channels,
        depth_channels: c.depth_channels,
        head_channels: c.head_channels,
        depth_hook: "stride-4 aggregated decoder feature, before the depth head".into(),
        epoch,
        net: c.clone(),
        tensors: net
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape(),
            })
            .collect(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut tar = tar::Builder::new(file);
    let mut append = |name: &str, bytes: &[u8]| -> Result<()> {
        let mut h = tar::Header::new_gnu();
        h.set_size(bytes.len() as u64);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_cksum();
        tar.append_data(&mut h, name, bytes).map_err(tar_err(path))
    };
    append("manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    for (i, (_, t)) in net.params.iter().enumerate() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        append(&blob_name(i), &bytes)?;
    }
    tar.into_inner()
        .and_then(|mut f| f.flush())
        .map_err(tar_err(path))
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ar = tar::Archive::new(file);
    for entry in ar.entries().map_err(tar_err(path))? {
        let mut entry = entry.map_err(tar_err(path))?;
        if entry.path().map_err(tar_err(path))?.to_str() == Some("manifest.json") {
            let mut s = String::new();
            entry.read_to_string(&mut s).map_err(tar_err(path))?;
            return Ok(serde_json::from_str(&s)?);
        }
    }
    Err(Error::Format(format!("{}: no manifest.json", path.display())))
}

/// Loads a checkpoint, refusing it when its architecture hash differs from
/// `expected`'s.
pub fn load_checkpoint(path: &Path, expected: &NetConfig) -> Result<(XpdNet, CheckpointManifest)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ar = tar::Archive::new(file);
    let mut manifest: Option<CheckpointManifest> = None;
    let mut blobs: Vec<(String, Vec<u8>)> = Vec::new();
    for entry in ar.entries().map_err(tar_err(path))? {
        let mut entry = entry.map_err(tar_err(path))?;
        let name = entry
            .path()
            .map_err(tar_err(path))?
            .to_string_lossy()
            .into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(tar_err(path))?;
        if name == "manifest.json" {
            manifest = Some(serde_json::from_slice(&bytes)?);
        } else {
            blobs.push((name, bytes));
        }
    }
    let manifest = manifest.ok_or_else(|| Error::Format(format!("{}: no manifest.json", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint format_version {}",
            path.display(),
            manifest.format_version
        )));
    }
    let want = expected.arch_hash();
    if manifest.arch_hash != want || manifest.net.arch_hash() != want {
        return Err(Error::HashMismatch {
            checkpoint: manifest.arch_hash.clone(),
            expected: want,
        });
    }
    let mut net = XpdNet::new(manifest.net.clone(), 0)?;
    if net.params.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "{}: {} tensors, architecture has {}",
            path.display(),
            manifest.tensors.len(),
            net.params.len()
        )));
    }
    for (i, e) in manifest.tensors.iter().enumerate() {
        let id = net
            .params
            .id(&e.name)
            .ok_or_else(|| Error::Format(format!("{}: unknown tensor {}", path.display(), e.name)))?;
        let slot = net.params.get_mut(id);
        if slot.shape() != e.shape {
            return Err(Error::Format(format!("{}: shape mismatch for {}", path.display(), e.name)));
        }
        let bytes = blobs
            .iter()
            .find(|(n, _)| *n == blob_name(i))
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Format(format!("{}: missing {}", path.display(), blob_name(i))))?;
        if bytes.len() != 8 * slot.numel() {
            return Err(Error::Format(format!("{}: truncated {}", path.display(), e.name)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *slot = Tensor::from_vec(e.shape, data)?;
    }
    Ok((net, manifest))
}
