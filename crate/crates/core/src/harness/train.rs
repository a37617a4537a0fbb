//! The optimisation loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::augment::{augment, Augmented};
use super::checkpoint::save_checkpoint;
use super::config::RunConfig;
use super::dataset::{load_manifest, load_sample, scene_seed, split, Sample, INCOMPLETE};
use super::eval::{evaluate, write_report, EvalSettings, Predictor};
use super::optim::Adam;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::losses::{composite_loss, prepare_targets, LossBreakdown, LossConfig, NoConstraints, SampleTargets};
use crate::metrics::MetricsReport;
use crate::net::XpdNet;
use crate::scene_io::write_json;

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    grad_norm: f64,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

/// Loss and parameter gradients for one batch of (already augmented) items.
pub fn batch_gradients(
    net: &XpdNet,
    items: &[Augmented],
    loss: &LossConfig,
) -> Result<(LossBreakdown, Vec<crate::tensor::Tensor>)> {
    let targets = prepare_targets(
        &items
            .iter()
            .map(|a| SampleTargets {
                labels: &a.labels,
                depth: &a.depth,
            })
            .collect::<Vec<_>>(),
        loss,
    )?;
    let rgbs: Vec<_> = items.iter().map(|a| &a.rgb).collect();
    let mut g = Graph::new();
    let bd = net.params.bind(&mut g);
    let x = g.constant(crate::Tensor::from_images(&rgbs)?);
    let out = net.forward(&mut g, &bd, x)?;
    let lv = composite_loss(&mut g, &out, &targets, loss, &NoConstraints)?;
    let breakdown = lv.breakdown(&g);
    if !breakdown.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    let mut grads = g.backward(lv.total)?;
    Ok((breakdown, bd.collect(&net.params, &mut grads)))
}

pub struct TrainOutcome {
    pub net: XpdNet,
    pub report: MetricsReport,
    pub checkpoints: Vec<PathBuf>,
    pub steps: usize,
}

/// Trains on the dataset's training split, checkpoints every epoch and
/// evaluates the final model on the held-out split.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.dataset)?;
    let (train_idx, eval_idx) = split(manifest.scene_seeds.len(), cfg.eval_scenes)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(INCOMPLETE);
    fs::write(&marker, b"training in progress\n").map_err(|e| Error::io(&marker, e))?;
    write_json(cfg, &out.join("config.json"))?;

    let train: Vec<Sample> = train_idx
        .iter()
        .map(|&i| load_sample(&cfg.dataset, i, cfg.train_labels))
        .collect::<Result<_>>()?;
    let held_out: Vec<Sample> = eval_idx
        .iter()
        .map(|&i| load_sample(&cfg.dataset, i, cfg.eval_labels))
        .collect::<Result<_>>()?;

    let mut net = XpdNet::new(cfg.net.clone(), cfg.seed)?;
    let mut opt = Adam::new(&net.params, cfg.optim);
    let log_path = out.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last = LossBreakdown::default();
    let mut step = 0;
    let mut checkpoints = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = opt.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<Augmented> = chunk
                .iter()
                .map(|&k| {
                    let s = &train[k];
                    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed ^ ((epoch as u64) << 32), s.index));
                    augment(&s.scene.rgb, &s.scene.depth, &s.labels, &cfg.augment, &mut rng)
                })
                .collect();
            let (b, grads) = batch_gradients(&net, &items, &cfg.loss)?;
            if !b.is_finite() {
                let _ = log.flush();
                return Err(Error::NonFiniteLoss {
                    step,
                    last: serde_json::to_string(&last)?,
                });
            }
            let grad_norm = opt.step(&mut net.params, &grads, lr);
            serde_json::to_writer(
                &mut log,
                &LogLine {
                    epoch,
                    step,
                    lr,
                    grad_norm,
                    loss: &b,
                },
            )?;
            log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
            last = b;
            epoch_total += b.total;
            batches += 1;
            step += 1;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let ck = out.join(format!("ckpt-epoch{}.tar", epoch + 1));
        save_checkpoint(&net, epoch + 1, &ck)?;
        checkpoints.push(ck);
        log::info!(
            "epoch {}/{}: mean loss {:.5} over {batches} steps",
            epoch + 1,
            cfg.epochs,
            epoch_total / batches.max(1) as f64
        );
    }
    let settings = EvalSettings {
        decode: &cfg.decode,
        boundary_iou: &cfg.boundary_iou,
        batch_size: cfg.batch_size,
        dataset_hash: manifest.hash(),
        eval_labels: cfg.eval_labels,
    };
    let report = evaluate(Predictor::Model(&net), &held_out, &settings)?;
    write_report(&report, out, "report")?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(TrainOutcome {
        net,
        report,
        checkpoints,
        steps: step,
    })
}
