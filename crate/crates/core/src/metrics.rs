//! Evaluation: COCO-style mask and box AP, Boundary IoU and depth errors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::net::{binary_iou, BBox, InstancePrediction, MASK_STRIDE};
use crate::raster;
use crate::scene::{instance_ids, Label};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const RECALL_POINTS: usize = 101;

/// A ground-truth instance at mask resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub id: Label,
    pub mask: Array2<bool>,
    pub bbox: BBox,
}

impl GtInstance {
    /// Instances of a mask-resolution label map; ids with no pixel are skipped.
    pub fn from_labels(labels: &Array2<Label>) -> Vec<GtInstance> {
        instance_ids(labels)
            .into_iter()
            .filter_map(|id| {
                let mask = labels.mapv(|l| l == id);
                BBox::of_mask(&mask, MASK_STRIDE).map(|bbox| GtInstance { id, mask, bbox })
            })
            .collect()
    }
}

/// A scored detection reduced to what the metrics need.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub mask: Array2<bool>,
    pub bbox: BBox,
    pub score: f64,
}

impl From<&InstancePrediction> for Detection {
    fn from(p: &InstancePrediction) -> Self {
        Detection {
            mask: p.binary(),
            bbox: p.bbox,
            score: p.score,
        }
    }
}

impl Detection {
    pub fn from_gt(gt: &GtInstance, score: f64) -> Self {
        Detection {
            mask: gt.mask.clone(),
            bbox: gt.bbox,
            score,
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`, 1 when both are empty.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err!("mask_iou: {:?} vs {:?}", a.dim(), b.dim()));
    }
    Ok(binary_iou(a, b))
}

fn pair_iou(d: &Detection, g: &GtInstance, box_mode: bool) -> f64 {
    if box_mode {
        d.bbox.iou(&g.bbox)
    } else {
        binary_iou(&d.mask, &g.mask)
    }
}

/// Indices of `dets` in visiting order: descending score, ties by index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching in score order. Each detection takes the unmatched GT with
/// the highest IoU ≥ `thresh` (ties to the lower index). Returns, per
/// detection, the matched GT index.
pub fn greedy_match(dets: &[Detection], gts: &[GtInstance], thresh: f64, box_mode: bool) -> Vec<Option<usize>> {
    let mut used = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let iou = pair_iou(&dets[i], g, box_mode);
            if iou >= thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// One evaluated image.
#[derive(Clone, Debug, Default)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub gts: Vec<GtInstance>,
}

/// 101-point interpolated AP at one IoU threshold over a dataset. `None`
/// when there is no ground truth at all.
pub fn ap_at(images: &[ImageResult], thresh: f64, box_mode: bool) -> Option<f64> {
    let n_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    if n_gt == 0 {
        return None;
    }
    // (score, image, det index, is_tp)
    let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (k, im) in images.iter().enumerate() {
        let m = greedy_match(&im.detections, &im.gts, thresh, box_mode);
        for (i, d) in im.detections.iter().enumerate() {
            all.push((d.score, k, i, m[i].is_some()));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(all.len());
    let mut precision = Vec::with_capacity(all.len());
    for (i, e) in all.iter().enumerate() {
        tp += e.3 as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope: running max from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / RECALL_POINTS as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApValues {
    /// Mean over [`coco_thresholds`].
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

pub fn average_precision(images: &[ImageResult], box_mode: bool) -> ApValues {
    let th = coco_thresholds();
    let per: Vec<Option<f64>> = th.iter().map(|&t| ap_at(images, t, box_mode)).collect();
    let ap = per
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    if ap.is_none() {
        log::warn!("no ground-truth instances; AP undefined");
    }
    ApValues {
        ap,
        ap50: per[0],
        ap75: per[5],
    }
}

/// Binary boundary set: pixels where the Laplacian of the mask is non-zero.
pub fn boundary_set(mask: &Array2<bool>) -> Array2<bool> {
    let m = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    raster::laplacian_boundary(&m)
        .expect("binary masks are in range")
        .values
        .mapv(|v| v > 0.0)
}

/// Chebyshev dilation by `px`.
pub fn dilate(set: &Array2<bool>, px: usize) -> Array2<bool> {
    if px == 0 {
        return set.clone();
    }
    let d = raster::chebyshev_distance(set);
    d.mapv(|v| v as usize <= px)
}

/// Set IoU of two boundary sets; both empty gives 1.
pub fn boundary_set_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    binary_iou(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryIouConfig {
    pub match_iou: f64,
    pub dilate_px: usize,
}

impl Default for BoundaryIouConfig {
    fn default() -> Self {
        BoundaryIouConfig {
            match_iou: 0.5,
            dilate_px: 0,
        }
    }
}

/// Sum of matched-pair boundary IoUs for one image (unmatched GT adds 0).
pub fn boundary_iou_sum(im: &ImageResult, cfg: &BoundaryIouConfig) -> f64 {
    let m = greedy_match(&im.detections, &im.gts, cfg.match_iou, false);
    m.iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .map(|(i, j)| {
            let a = dilate(&boundary_set(&im.detections[i].mask), cfg.dilate_px);
            let b = dilate(&boundary_set(&im.gts[j].mask), cfg.dilate_px);
            boundary_set_iou(&a, &b)
        })
        // `sum` starts from -0.0, which would print as "-0.0000".
        .fold(0.0, |acc, v| acc + v)
}

/// Dataset Boundary IoU: per-image means weighted by GT count, i.e. the sum
/// of pair scores over the total GT count.
pub fn boundary_iou(images: &[ImageResult], cfg: &BoundaryIouConfig) -> Option<f64> {
    let n_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    if n_gt == 0 {
        log::warn!("no ground-truth instances; boundary IoU undefined");
        return None;
    }
    let s: f64 = images.iter().map(|im| boundary_iou_sum(im, cfg)).sum();
    Some(s / n_gt as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Pixel-pooled accumulator over any number of images.
#[derive(Clone, Copy, Debug, Default)]
pub struct DepthAccumulator {
    n: usize,
    rel: f64,
    log10: f64,
    sq: f64,
    d: [usize; 3],
}

impl DepthAccumulator {
    /// Adds every pixel with `gt > 0`.
    pub fn add(&mut self, pred: &Array2<f64>, gt: &Array2<f64>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(shape_err!("depth: {:?} vs {:?}", pred.dim(), gt.dim()));
        }
        for (&p, &t) in pred.iter().zip(gt.iter()) {
            if t <= 0.0 {
                continue;
            }
            if !(p > 0.0) {
                return Err(crate::Error::Domain(format!("predicted depth {p} is not positive")));
            }
            self.n += 1;
            self.rel += (p - t).abs() / t;
            self.log10 += (p.log10() - t.log10()).abs();
            self.sq += (p - t) * (p - t);
            let ratio = (p / t).max(t / p);
            for (i, c) in self.d.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(i as i32 + 1) {
                    *c += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Option<DepthMetrics> {
        if self.n == 0 {
            log::warn!("no valid depth pixels; depth metrics undefined");
            return None;
        }
        let n = self.n as f64;
        Some(DepthMetrics {
            rel: self.rel / n,
            log10: self.log10 / n,
            rms: (self.sq / n).sqrt(),
            delta1: self.d[0] as f64 / n,
            delta2: self.d[1] as f64 / n,
            delta3: self.d[2] as f64 / n,
        })
    }
}

pub fn depth_metrics(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<Option<DepthMetrics>> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt)?;
    Ok(acc.finish())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub images: usize,
    pub gt_instances: usize,
    pub predictions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub matching: String,
    pub mask_resolution_stride: usize,
    pub box_convention: String,
    pub boundary_iou: BoundaryIouConfig,
    pub boundary_iou_unmatched_gt: String,
    pub delta_comparison: String,
    pub depth_pooling: String,
    pub dataset_hash: String,
    pub eval_labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap_m: Option<f64>,
    pub ap_m50: Option<f64>,
    pub ap_m75: Option<f64>,
    pub ap_b: Option<f64>,
    pub ap_b50: Option<f64>,
    pub ap_b75: Option<f64>,
    pub boundary_iou: Option<f64>,
    pub depth: Option<DepthMetrics>,
    pub counts: Counts,
    pub metadata: ReportMetadata,
}

impl MetricsReport {
    pub fn build(
        images: &[ImageResult],
        depth: Option<DepthMetrics>,
        biou: &BoundaryIouConfig,
        dataset_hash: String,
        eval_labels: &str,
    ) -> Self {
        let m = average_precision(images, false);
        let b = average_precision(images, true);
        MetricsReport {
            ap_m: m.ap,
            ap_m50: m.ap50,
            ap_m75: m.ap75,
            ap_b: b.ap,
            ap_b50: b.ap50,
            ap_b75: b.ap75,
            boundary_iou: boundary_iou(images, biou),
            depth,
            counts: Counts {
                images: images.len(),
                gt_instances: images.iter().map(|i| i.gts.len()).sum(),
                predictions: images.iter().map(|i| i.detections.len()).sum(),
            },
            metadata: ReportMetadata {
                iou_thresholds: coco_thresholds(),
                recall_points: RECALL_POINTS,
                matching: "greedy by descending score, best unmatched IoU".into(),
                mask_resolution_stride: MASK_STRIDE,
                box_convention: "tight box of the binarised mask-resolution mask, x4, exclusive end".into(),
                boundary_iou: *biou,
                boundary_iou_unmatched_gt: "counts as 0".into(),
                delta_comparison: "strict <".into(),
                depth_pooling: "mean over all valid pixels of the dataset".into(),
                dataset_hash,
                eval_labels: eval_labels.into(),
            },
        }
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("null".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        s += &format!("{:<14}{:>10}{:>10}{:>10}\n", "", "AP", "AP50", "AP75");
        s += &format!("{:<14}{:>10}{:>10}{:>10}\n", "mask", f(self.ap_m), f(self.ap_m50), f(self.ap_m75));
        s += &format!("{:<14}{:>10}{:>10}{:>10}\n", "box", f(self.ap_b), f(self.ap_b50), f(self.ap_b75));
        s += &format!("{:<14}{:>10}\n", "boundary IoU", f(self.boundary_iou));
        if let Some(d) = self.depth {
            s += &format!(
                "depth  rel {:.4}  log10 {:.4}  rms {:.4}  d1 {:.4}  d2 {:.4}  d3 {:.4}\n",
                d.rel, d.log10, d.rms, d.delta1, d.delta2, d.delta3
            );
        } else {
            s += "depth  null\n";
        }
        s += &format!(
            "images {}  gt {}  predictions {}\n",
            self.counts.images, self.counts.gt_instances, self.counts.predictions
        );
        s
    }
}
