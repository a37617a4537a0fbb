//! Fixed image-processing kernels behind the depth-guided boundary loss:
//! Sobel gradient magnitude, Laplacian boundaries, windowed standard
//! deviation and per-instance weight normalisation.
//!
//! All 3×3 kernels use replicate padding at the image border.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
pub const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// Guard added to the normalisation denominator.
pub const WEIGHT_EPS: f64 = 1e-8;

/// `|Sobel_x| + |Sobel_y|` of a depth map plus a validity flag per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMask {
    pub values: Array2<f64>,
    /// False where the 3×3 neighbourhood touches an invalid (zero) depth.
    pub valid: Array2<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMap {
    pub values: Array2<f64>,
}

impl BoundaryMap {
    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v <= 0.0)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.values
            .indexed_iter()
            .filter(|(_, &v)| v > 0.0)
            .map(|(p, _)| p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub values: Array2<f64>,
}

/// How weights are extended off the ground-truth boundary band.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Weights only on ground-truth boundary pixels, zero elsewhere.
    GtBandOnly,
    /// Normalised std clipped to `[0, 1]` at every pixel.
    #[default]
    FullField,
}

#[inline]
fn clamped(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

/// 3×3 correlation with replicate padding.
pub fn correlate3x3(src: &Array2<f64>, kernel: &[f64; 9]) -> Array2<f64> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = 0.0;
        for (k, &kv) in kernel.iter().enumerate() {
            if kv != 0.0 {
                let rr = clamped(r as isize + (k / 3) as isize - 1, h);
                let cc = clamped(c as isize + (k % 3) as isize - 1, w);
                acc += kv * src[[rr, cc]];
            }
        }
        acc
    })
}

pub fn sobel_gradient_mask(depth: &Array2<f64>) -> Result<GradientMask> {
    let (h, w) = depth.dim();
    if h < 3 || w < 3 {
        return Err(shape_err!("sobel needs at least 3x3 input, got {h}x{w}"));
    }
    let gx = correlate3x3(depth, &SOBEL_X);
    let gy = correlate3x3(depth, &SOBEL_Y);
    let values = Array2::from_shape_fn((h, w), |p| gx[p].abs() + gy[p].abs());
    let valid = Array2::from_shape_fn((h, w), |(r, c)| {
        (-1..=1).all(|dr| {
            (-1..=1).all(|dc| {
                depth[[clamped(r as isize + dr, h), clamped(c as isize + dc, w)]] > 0.0
            })
        })
    });
    Ok(GradientMask { values, valid })
}

/// `min(|Laplacian(mask)|, 1)` for a binary or soft mask in `[0, 1]`.
pub fn laplacian_boundary(mask: &Array2<f64>) -> Result<BoundaryMap> {
    if let Some(v) = mask.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("mask value {v} outside [0, 1]")));
    }
    let lap = correlate3x3(mask, &LAPLACIAN);
    Ok(BoundaryMap {
        values: lap.mapv(|v| v.abs().min(1.0)),
    })
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(config_err!("window must be odd and >= 3, got {window}"));
    }
    Ok(())
}

fn std_at(g: &GradientMask, r: usize, c: usize, window: usize, buf: &mut Vec<f64>) -> f64 {
    let (h, w) = g.values.dim();
    let half = (window / 2) as isize;
    buf.clear();
    for dr in -half..=half {
        for dc in -half..=half {
            let rr = clamped(r as isize + dr, h);
            let cc = clamped(c as isize + dc, w);
            if g.valid[[rr, cc]] {
                buf.push(g.values[[rr, cc]]);
            }
        }
    }
    if buf.len() < 2 {
        return 0.0;
    }
    // Shift by the first sample so equal windows give exactly zero.
    let shift = buf[0];
    let n = buf.len() as f64;
    let mean = buf.iter().map(|v| v - shift).sum::<f64>() / n;
    (buf.iter()
        .map(|v| (v - shift - mean) * (v - shift - mean))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Population standard deviation of the `window × window` neighbourhood of
/// each queried pixel. Invalid gradient entries are skipped; fewer than two
/// valid entries give 0.
pub fn windowed_std(g: &GradientMask, at: &[(usize, usize)], window: usize) -> Result<Vec<f64>> {
    check_window(window)?;
    let (h, w) = g.values.dim();
    if let Some(p) = at.iter().find(|(r, c)| *r >= h || *c >= w) {
        return Err(shape_err!("pixel {p:?} outside {h}x{w}"));
    }
    let mut buf = Vec::with_capacity(window * window);
    Ok(at
        .iter()
        .map(|&(r, c)| std_at(g, r, c, window, &mut buf))
        .collect())
}

/// [`windowed_std`] evaluated at every pixel.
pub fn windowed_std_map(g: &GradientMask, window: usize) -> Result<Array2<f64>> {
    check_window(window)?;
    let mut buf = Vec::with_capacity(window * window);
    Ok(Array2::from_shape_fn(g.values.dim(), |(r, c)| {
        std_at(g, r, c, window, &mut buf)
    }))
}

/// Result of [`normalize_weights`]; `degenerate` is set when the instance
/// has no ground-truth boundary pixels at all.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub weights: WeightMap,
    pub degenerate: bool,
}

/// Normalises windowed std values by their maximum over the instance's
/// ground-truth boundary.
pub fn normalize_weights(
    std_map: &Array2<f64>,
    gt_boundary: &BoundaryMap,
    mode: WeightMode,
) -> Result<Normalized> {
    if std_map.dim() != gt_boundary.values.dim() {
        return Err(shape_err!(
            "std map {:?} vs boundary {:?}",
            std_map.dim(),
            gt_boundary.values.dim()
        ));
    }
    if std_map.iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Domain("std values must be non-negative".into()));
    }
    let zeros = || WeightMap {
        values: Array2::zeros(std_map.dim()),
    };
    if gt_boundary.is_empty() {
        log::warn!("degenerate instance: empty ground-truth boundary, weights set to 0");
        return Ok(Normalized {
            weights: zeros(),
            degenerate: true,
        });
    }
    let m = gt_boundary
        .pixels()
        .map(|p| std_map[p])
        .fold(0.0f64, f64::max);
    if m == 0.0 {
        return Ok(Normalized {
            weights: zeros(),
            degenerate: false,
        });
    }
    let denom = m + WEIGHT_EPS;
    let values = match mode {
        WeightMode::GtBandOnly => Array2::from_shape_fn(std_map.dim(), |p| {
            if gt_boundary.values[p] > 0.0 {
                std_map[p] / denom
            } else {
                0.0
            }
        }),
        WeightMode::FullField => std_map.mapv(|s| (s / denom).clamp(0.0, 1.0)),
    };
    Ok(Normalized {
        weights: WeightMap { values },
        degenerate: false,
    })
}

/// Average-pools depth by `factor` over valid (positive) pixels; blocks with
/// no valid pixel become 0.
pub fn pool_depth(depth: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    let (h, w) = depth.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("{h}x{w} not divisible by {factor}"));
    }
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(r, c)| {
        let block = depth.slice(ndarray::s![
            r * factor..(r + 1) * factor,
            c * factor..(c + 1) * factor
        ]);
        let (sum, n) = block
            .iter()
            .filter(|&&d| d > 0.0)
            .fold((0.0, 0usize), |(s, n), &d| (s + d, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }))
}

/// Majority-vote downsampling of a label map; ties go to the smaller id.
pub fn downsample_labels(labels: &Array2<u16>, factor: usize) -> Result<Array2<u16>> {
    let (h, w) = labels.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("{h}x{w} not divisible by {factor}"));
    }
    let mut counts: Vec<(u16, usize)> = Vec::new();
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(r, c)| {
        counts.clear();
        for rr in r * factor..(r + 1) * factor {
            for cc in c * factor..(c + 1) * factor {
                let l = labels[[rr, cc]];
                match counts.iter_mut().find(|(k, _)| *k == l) {
                    Some((_, n)) => *n += 1,
                    None => counts.push((l, 1)),
                }
            }
        }
        counts
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|&(l, _)| l)
            .unwrap_or(0)
    }))
}

/// Binary `{0, 1}` mask of one instance id.
pub fn instance_mask(labels: &Array2<u16>, id: u16) -> Array2<f64> {
    labels.mapv(|l| if l == id { 1.0 } else { 0.0 })
}

/// Pixels with at least one 4-neighbour of a different label.
pub fn label_transitions(labels: &Array2<u16>) -> Array2<bool> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let l = labels[[r, c]];
        (r > 0 && labels[[r - 1, c]] != l)
            || (r + 1 < h && labels[[r + 1, c]] != l)
            || (c > 0 && labels[[r, c - 1]] != l)
            || (c + 1 < w && labels[[r, c + 1]] != l)
    })
}

/// Exact Chebyshev distance to the nearest `true` pixel (two-pass chamfer with
/// unit 8-neighbour steps). Pixels are `u32::MAX` when there is no seed.
pub fn chebyshev_distance(seeds: &Array2<bool>) -> Array2<u32> {
    let (h, w) = seeds.dim();
    let inf = u32::MAX;
    let mut d = seeds.mapv(|s| if s { 0 } else { inf });
    let relax = |cur: u32, other: u32| cur.min(other.saturating_add(1));
    for r in 0..h {
        for c in 0..w {
            let mut v = d[[r, c]];
            if r > 0 {
                v = relax(v, d[[r - 1, c]]);
                if c > 0 {
                    v = relax(v, d[[r - 1, c - 1]]);
                }
                if c + 1 < w {
                    v = relax(v, d[[r - 1, c + 1]]);
                }
            }
            if c > 0 {
                v = relax(v, d[[r, c - 1]]);
            }
            d[[r, c]] = v;
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let mut v = d[[r, c]];
            if r + 1 < h {
                v = relax(v, d[[r + 1, c]]);
                if c > 0 {
                    v = relax(v, d[[r + 1, c - 1]]);
                }
                if c + 1 < w {
                    v = relax(v, d[[r + 1, c + 1]]);
                }
            }
            if c + 1 < w {
                v = relax(v, d[[r, c + 1]]);
            }
            d[[r, c]] = v;
        }
    }
    d
}
