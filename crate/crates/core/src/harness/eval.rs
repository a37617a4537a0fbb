//! Inference over a sample list and the resulting metrics report.

use std::fs;
use std::path::Path;

use super::config::{LabelSet, RunConfig};
use super::dataset::{load_manifest, load_sample, split, Sample};
use super::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{BoundaryIouConfig, DepthAccumulator, Detection, GtInstance, ImageResult, MetricsReport};
use crate::net::{assemble_instances, DecodeConfig, XpdNet, MASK_STRIDE};
use crate::raster::downsample_labels;
use crate::scene_io::write_json;

/// Where predictions come from.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a XpdNet),
    /// Ground truth passed through as predictions (score 1, exact depth).
    Oracle,
}

pub struct EvalSettings<'a> {
    pub decode: &'a DecodeConfig,
    pub boundary_iou: &'a BoundaryIouConfig,
    pub batch_size: usize,
    pub dataset_hash: String,
    pub eval_labels: LabelSet,
}

pub fn ground_truth(sample: &Sample) -> Result<Vec<GtInstance>> {
    Ok(GtInstance::from_labels(&downsample_labels(&sample.labels, MASK_STRIDE)?))
}

pub fn evaluate(pred: Predictor<'_>, samples: &[Sample], s: &EvalSettings<'_>) -> Result<MetricsReport> {
    let mut images = Vec::with_capacity(samples.len());
    let mut depth = DepthAccumulator::default();
    for chunk in samples.chunks(s.batch_size.max(1)) {
        match pred {
            Predictor::Oracle => {
                for sm in chunk {
                    let gts = ground_truth(sm)?;
                    images.push(ImageResult {
                        detections: gts.iter().map(|g| Detection::from_gt(g, 1.0)).collect(),
                        gts,
                    });
                    depth.add(&sm.scene.depth, &sm.scene.depth)?;
                }
            }
            Predictor::Model(net) => {
                let rgbs: Vec<_> = chunk.iter().map(|sm| &sm.scene.rgb).collect();
                let p = net.infer(&crate::Tensor::from_images(&rgbs)?)?;
                for (i, sm) in chunk.iter().enumerate() {
                    let inst = assemble_instances(&p.seg, i, s.decode)?;
                    images.push(ImageResult {
                        detections: inst.iter().map(Detection::from).collect(),
                        gts: ground_truth(sm)?,
                    });
                    depth.add(&p.depth.map(i, 0), &sm.scene.depth)?;
                }
            }
        }
    }
    Ok(MetricsReport::build(
        &images,
        depth.finish(),
        s.boundary_iou,
        s.dataset_hash.clone(),
        &s.eval_labels.to_string(),
    ))
}

/// Writes `<stem>.json` and `<stem>.txt` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path, stem: &str) -> Result<()> {
    write_json(report, &dir.join(format!("{stem}.json")))?;
    let p = dir.join(format!("{stem}.txt"));
    fs::write(&p, report.table()).map_err(|e| Error::io(&p, e))
}

/// Evaluates a checkpoint (or the oracle) on the held-out scenes.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, oracle: bool) -> Result<MetricsReport> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.dataset)?;
    let (_, eval_idx) = split(manifest.scene_seeds.len(), cfg.eval_scenes)?;
    let net = match (checkpoint, oracle) {
        (_, true) => None,
        (Some(p), false) => Some(load_checkpoint(p, &cfg.net)?.0),
        (None, false) => {
            return Err(Error::Config("eval needs a checkpoint unless oracle mode is on".into()));
        }
    };
    let samples = eval_idx
        .iter()
        .map(|&i| load_sample(&cfg.dataset, i, cfg.eval_labels))
        .collect::<Result<Vec<_>>>()?;
    let settings = EvalSettings {
        decode: &cfg.decode,
        boundary_iou: &cfg.boundary_iou,
        batch_size: cfg.batch_size,
        dataset_hash: manifest.hash(),
        eval_labels: cfg.eval_labels,
    };
    let pred = match &net {
        Some(n) => Predictor::Model(n),
        None => Predictor::Oracle,
    };
    let report = evaluate(pred, &samples, &settings)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_report(&report, &cfg.output_dir, "eval_report")?;
    Ok(report)
}
