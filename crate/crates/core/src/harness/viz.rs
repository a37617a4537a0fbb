//! Image outputs for inspection: instance overlays, depth colour maps,
//! normals recovered from depth and boundary-weight heat maps.

use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use super::checkpoint::load_checkpoint;
use super::config::{LabelSet, RunConfig};
use super::dataset::{load_manifest, load_sample, noisy_label_path};
use crate::error::{config_err, Error, Result};
use crate::losses::{boundary_weights, depth_std_map};
use crate::net::{assemble_instances, InstancePrediction, MASK_STRIDE};
use crate::raster::{downsample_labels, instance_mask, label_transitions, WeightMode};
use crate::tensor::Tensor;
use crate::scene::{instance_ids, CameraIntrinsics, Label, Vec3};
use crate::scene_io::rgb_to_image;

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Deterministic, well-separated colour per instance id (golden-angle hue).
pub fn instance_color(id: Label) -> [f64; 3] {
    let h = (id as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.2 + 0.8 * r, 0.2 + 0.8 * g, 0.2 + 0.8 * b]
}

/// Half-transparent instance colours with white outlines on label changes.
pub fn overlay(rgb: &Array3<f64>, labels: &Array2<Label>) -> Array3<f64> {
    let edges = label_transitions(labels);
    Array3::from_shape_fn(rgb.dim(), |(r, c, k)| {
        let l = labels[[r, c]];
        if edges[[r, c]] {
            1.0
        } else if l == 0 {
            rgb[[r, c, k]] * 0.5
        } else {
            0.5 * rgb[[r, c, k]] + 0.5 * instance_color(l)[k]
        }
    })
}

const STOPS: [[f64; 3]; 5] = [
    [0.27, 0.00, 0.33],
    [0.23, 0.32, 0.55],
    [0.13, 0.57, 0.55],
    [0.37, 0.79, 0.38],
    [0.99, 0.91, 0.15],
];

/// Piecewise-linear perceptual colour map on `[0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * f)
}

/// Colour-mapped depth; invalid pixels are black.
pub fn depth_image(depth: &Array2<f64>) -> Array3<f64> {
    let valid = depth.iter().copied().filter(|&d| d > 0.0);
    let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), d| (l.min(d), h.max(d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Array3::from_shape_fn((depth.nrows(), depth.ncols(), 3), |(r, c, k)| {
        let d = depth[[r, c]];
        if d > 0.0 {
            colormap((d - lo) / span)[k]
        } else {
            0.0
        }
    })
}

/// Camera-frame normals from central differences of the back-projected
/// depth map, oriented towards the camera. Border and invalid pixels are 0.
pub fn normals_from_depth(depth: &Array2<f64>, k: &CameraIntrinsics) -> Array2<Vec3> {
    let (h, w) = depth.dim();
    let point = |r: usize, c: usize| {
        let ray = k.ray(r, c);
        let d = depth[[r, c]];
        [ray[0] * d, ray[1] * d, d]
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
            return [0.0; 3];
        }
        let ns = [depth[[r, c - 1]], depth[[r, c + 1]], depth[[r - 1, c]], depth[[r + 1, c]]];
        if ns.iter().any(|&d| d <= 0.0) || depth[[r, c]] <= 0.0 {
            return [0.0; 3];
        }
        let (a, b) = (point(r, c - 1), point(r, c + 1));
        let (u, v) = (point(r - 1, c), point(r + 1, c));
        let dx = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let dy = [v[0] - u[0], v[1] - u[1], v[2] - u[2]];
        let mut n = [
            dx[1] * dy[2] - dx[2] * dy[1],
            dx[2] * dy[0] - dx[0] * dy[2],
            dx[0] * dy[1] - dx[1] * dy[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len == 0.0 {
            return [0.0; 3];
        }
        let p = point(r, c);
        let sign = if n[0] * p[0] + n[1] * p[1] + n[2] * p[2] > 0.0 { -1.0 } else { 1.0 };
        for x in &mut n {
            *x *= sign / len;
        }
        n
    })
}

pub fn normal_image(n: &Array2<Vec3>) -> Array3<f64> {
    Array3::from_shape_fn((n.nrows(), n.ncols(), 3), |(r, c, k)| {
        let v = n[[r, c]];
        if v == [0.0; 3] {
            0.0
        } else {
            0.5 * (v[k] + 1.0)
        }
    })
}

/// Per-pixel maximum over instances of the depth-guided boundary weight, at
/// mask resolution.
pub fn weight_field(labels: &Array2<Label>, depth: &Array2<f64>, mode: WeightMode) -> Result<Array2<f64>> {
    let small = downsample_labels(labels, MASK_STRIDE)?;
    let std_map = depth_std_map(depth)?;
    let mut out = Array2::<f64>::zeros(small.dim());
    for id in instance_ids(&small) {
        let w = boundary_weights(&std_map, &instance_mask(&small, id), mode)?;
        out.zip_mut_with(&w, |o, &v| *o = o.max(v));
    }
    Ok(out)
}

pub fn heatmap(w: &Array2<f64>, scale: usize) -> Array3<f64> {
    Array3::from_shape_fn((w.nrows() * scale, w.ncols() * scale, 3), |(r, c, k)| {
        colormap(w[[r / scale, c / scale]])[k]
    })
}

/// Writes overlay, depth, normal and weight images for one scene; with a
/// prediction, also the predicted counterparts. Returns the written paths.
pub fn write_scene_images(
    out: &Path,
    prefix: &str,
    rgb: &Array3<f64>,
    labels: &Array2<Label>,
    depth: &Array2<f64>,
    intrinsics: &CameraIntrinsics,
    weights: Option<&Array2<f64>>,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, img: RgbImage| -> Result<()> {
        let p = out.join(name);
        save(&img, &p)?;
        written.push(p);
        Ok(())
    };
    put(format!("{prefix}overlay.png"), rgb_to_image(&overlay(rgb, labels)))?;
    put(format!("{prefix}depth.png"), rgb_to_image(&depth_image(depth)))?;
    put(
        format!("{prefix}normals.png"),
        rgb_to_image(&normal_image(&normals_from_depth(depth, intrinsics))),
    )?;
    if let Some(w) = weights {
        put(format!("{prefix}weights.png"), rgb_to_image(&heatmap(w, MASK_STRIDE)))?;
        let raw: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w.ncols() as u32, w.nrows() as u32, |x, y| {
            Luma([(w[[y as usize, x as usize]].clamp(0.0, 1.0) * u16::MAX as f64).round() as u16])
        });
        let p = out.join(format!("{prefix}weights16.png"));
        raw.save(&p).map_err(|source| Error::Image {
            path: p.clone(),
            source,
        })?;
        written.push(p);
    }
    Ok(written)
}

/// Paints instances into a full-resolution label map, higher scores on top.
pub fn paint_instances(instances: &[InstancePrediction], height: usize, width: usize) -> Array2<Label> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[a].score.total_cmp(&instances[b].score));
    let mut out = Array2::<Label>::zeros((height, width));
    for &i in &order {
        let m = instances[i].binary();
        for ((r, c), v) in out.indexed_iter_mut() {
            if m.get((r / MASK_STRIDE, c / MASK_STRIDE)).copied().unwrap_or(false) {
                *v = (i + 1) as Label;
            }
        }
    }
    out
}

/// Renders ground-truth images (`gt_*`) for the given scenes and, with a
/// checkpoint, the model's predictions (`pred_*`). The weight map uses the
/// corrupted labels when the dataset has them.
pub fn cmd_visualize(cfg: &RunConfig, scenes: &[usize], checkpoint: Option<&Path>) -> Result<Vec<std::path::PathBuf>> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.dataset)?;
    if let Some(&bad) = scenes.iter().find(|&&i| i >= manifest.scene_seeds.len()) {
        return Err(config_err!("scene {bad} out of range (dataset has {})", manifest.scene_seeds.len()));
    }
    let net = checkpoint.map(|p| load_checkpoint(p, &cfg.net)).transpose()?.map(|(n, _)| n);
    let out = cfg.output_dir.join("viz");
    let mut written = Vec::new();
    for &i in scenes {
        let s = load_sample(&cfg.dataset, i, LabelSet::Clean)?;
        let k = &s.scene.intrinsics;
        let noisy = if noisy_label_path(&cfg.dataset, i).exists() {
            load_sample(&cfg.dataset, i, LabelSet::Corrupted)?.labels
        } else {
            s.labels.clone()
        };
        let w = weight_field(&noisy, &s.scene.depth, cfg.loss.weight_mode)?;
        let rgb = &s.scene.rgb;
        written.extend(write_scene_images(&out, &format!("{i:05}_gt_"), rgb, &s.labels, &s.scene.depth, k, Some(&w))?);
        if let Some(net) = &net {
            let p = net.infer(&Tensor::from_images(&[rgb])?)?;
            let inst = assemble_instances(&p.seg, 0, &cfg.decode)?;
            let (h, wd) = s.labels.dim();
            let labels = paint_instances(&inst, h, wd);
            let depth = p.depth.map(0, 0);
            written.extend(write_scene_images(&out, &format!("{i:05}_pred_"), rgb, &labels, &depth, k, None)?);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_plane_normals_face_camera() {
        let k = CameraIntrinsics::default_for(32, 48);
        let d = Array2::from_elem((32, 48), 2.0);
        let n = normals_from_depth(&d, &k);
        for r in 1..31 {
            for c in 1..47 {
                let v = n[[r, c]];
                assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12 && (v[2] + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlay_keeps_dimensions() {
        let rgb = Array3::from_elem((8, 12, 3), 0.5);
        let l = Array2::from_shape_fn((8, 12), |(_, c)| (c / 4) as Label);
        assert_eq!(overlay(&rgb, &l).dim(), (8, 12, 3));
        assert_eq!(depth_image(&Array2::from_elem((8, 12), 1.0)).dim(), (8, 12, 3));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), STOPS[0]);
        assert_eq!(colormap(1.0), STOPS[4]);
        assert_eq!(colormap(-3.0), STOPS[0]);
    }

    #[test]
    fn weight_field_peaks_on_depth_step() {
        // Two instances split at column 32 with a depth step there, plus a
        // label-only split at row 32 of the left instance with no depth change.
        let mut l = Array2::<Label>::from_shape_fn((64, 64), |(_, c)| if c < 32 { 1 } else { 2 });
        l.slice_mut(ndarray::s![32.., ..32]).fill(3);
        let d = Array2::from_shape_fn((64, 64), |(_, c)| if c < 32 { 2.0 } else { 3.0 });
        let w = weight_field(&l, &d, WeightMode::GtBandOnly).unwrap();
        // Mask resolution 16x16: true step straddles columns 7 and 8.
        assert!((w[[3, 7]] - 1.0).abs() < 1e-6);
        // The label-only boundary between 1 and 3 (rows 7 and 8, left side)
        // lies far from the step and gets zero weight.
        assert_eq!(w[[7, 2]], 0.0);
        assert_eq!(w[[8, 2]], 0.0);
    }
}
