//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them. Run with
//! `cargo test -p xpdnet-core --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use xpdnet_core::distill::Variant;
use xpdnet_core::gradcheck::{standard_suite, TOL, TOL_END_TO_END};
use xpdnet_core::harness::config::RunConfig;
use xpdnet_core::harness::dataset::generate_dataset;
use xpdnet_core::harness::train::cmd_train;
use xpdnet_core::losses::BoundaryLoss;
use xpdnet_core::metrics::{
    average_precision, boundary_iou, boundary_set_iou, depth_metrics, BoundaryIouConfig, Detection, GtInstance,
    ImageResult,
};
use xpdnet_core::net::{BBox, NetConfig, XpdNet};
use xpdnet_core::raster::{
    chebyshev_distance, instance_mask, label_transitions, laplacian_boundary, normalize_weights, sobel_gradient_mask,
    windowed_std, windowed_std_map, GradientMask, WeightMode,
};
use xpdnet_core::scene::{corrupt_boundaries, generate_scene, instance_ids, Label, SceneConfig};
use xpdnet_core::Tensor;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1. raster

fn brute_std(values: &Array2<f64>, valid: &Array2<bool>, r: usize, c: usize) -> f64 {
    let (h, w) = values.dim();
    let mut v = Vec::new();
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
            let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
            if valid[[rr, cc]] {
                v.push(values[[rr, cc]]);
            }
        }
    }
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn raster_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let values = Array2::from_shape_simple_fn((16, 16), || rng.random_range(0.0..5.0));
        let valid = Array2::from_shape_simple_fn((16, 16), || rng.random_bool(0.9));
        let g = GradientMask { values, valid };
        let map = windowed_std_map(&g, 3).map_err(|e| e.to_string())?;
        let at: Vec<(usize, usize)> = (0..16).flat_map(|r| (0..16).map(move |c| (r, c))).collect();
        let pts = windowed_std(&g, &at, 3).map_err(|e| e.to_string())?;
        for (k, &(r, c)) in at.iter().enumerate() {
            let b = brute_std(&g.values, &g.valid, r, c);
            worst = worst.max((map[[r, c]] - b).abs()).max((pts[k] - b).abs());
        }
    }
    ensure(worst < 1e-10, || format!("windowed_std off by {worst:.3e}"))?;

    // Ramp of slope 0.1 along columns: |Gx| = 4 · 2 · 0.1 = 0.8 inside.
    let ramp = Array2::from_shape_fn((6, 6), |(_, c)| 1.0 + 0.1 * c as f64);
    let g = sobel_gradient_mask(&ramp).map_err(|e| e.to_string())?;
    ensure((g.values[[2, 2]] - 0.8).abs() < 1e-12, || {
        format!("ramp G = {}", g.values[[2, 2]])
    })?;
    // Unit step between columns 2 and 3: G = 4 on both sides.
    let step = Array2::from_shape_fn((6, 6), |(_, c)| if c < 3 { 1.0 } else { 2.0 });
    let g = sobel_gradient_mask(&step).map_err(|e| e.to_string())?;
    ensure(g.values[[2, 2]] == 4.0 && g.values[[2, 3]] == 4.0 && g.values[[2, 0]] == 0.0, || {
        format!("step G row = {:?}", g.values.row(2))
    })?;
    // Single pixel: |−4| clipped to 1 at the centre, 1 on the 4-neighbours.
    let mut dot = Array2::zeros((5, 5));
    dot[[2, 2]] = 1.0;
    let b = laplacian_boundary(&dot).map_err(|e| e.to_string())?.values;
    let want = Array2::from_shape_fn((5, 5), |(r, c)| {
        let d = (r as i64 - 2).abs() + (c as i64 - 2).abs();
        if d <= 1 {
            1.0
        } else {
            0.0
        }
    });
    ensure(b == want, || format!("laplacian pattern {b:?}"))?;
    Ok(format!("windowed_std max diff {worst:.1e} over 100 maps; Sobel/Laplacian fixtures exact"))
}

// ------------------------------------------------------------- 2. gradients

fn gradient_suite() -> Outcome {
    let reports = standard_suite().map_err(|e| e.to_string())?;
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    ensure(reports.len() >= 6, || format!("only {} checks", reports.len()))?;
    ensure(failed.is_empty(), || {
        failed
            .iter()
            .map(|r| format!("{} {:.2e} >= {:.0e}", r.name, r.max_rel_err, r.tolerance))
            .collect::<Vec<_>>()
            .join(", ")
    })?;
    let tol_ok = reports
        .iter()
        .all(|r| r.tolerance == TOL || (r.name.starts_with("composite") && r.tolerance == TOL_END_TO_END));
    ensure(tol_ok, || "unexpected tolerance in suite".into())?;
    let max = reports
        .iter()
        .filter(|r| r.tolerance == TOL)
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let e2e = reports
        .iter()
        .filter(|r| r.tolerance == TOL_END_TO_END)
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    Ok(format!("{} checks, worst {max:.1e} (< 1e-4), end-to-end {e2e:.1e} (< 1e-3)", reports.len()))
}

// --------------------------------------------------------------- 3. metrics

fn bbox(m: &Array2<bool>) -> BBox {
    BBox::of_mask(m, 4).unwrap_or(BBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    })
}

fn count_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut i = 0usize;
    let mut u = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            i += 1;
        }
        if x || y {
            u += 1;
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Straightforward AP: per-threshold greedy matching by exhaustive scan, then
/// interpolated precision as a max over all ranks at or beyond each recall
/// point.
fn brute_ap(images: &[ImageResult]) -> Option<f64> {
    let n_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut per = Vec::new();
    for t in 0..10 {
        let thr = 0.5 + 0.05 * t as f64;
        let mut flat: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (k, im) in images.iter().enumerate() {
            let mut taken = vec![false; im.gts.len()];
            let mut order: Vec<usize> = (0..im.detections.len()).collect();
            // Insertion sort, descending score, stable on index.
            for i in 1..order.len() {
                let mut j = i;
                while j > 0 && im.detections[order[j]].score > im.detections[order[j - 1]].score {
                    order.swap(j, j - 1);
                    j -= 1;
                }
            }
            let mut tp = vec![false; im.detections.len()];
            for &d in &order {
                let mut best = None;
                let mut best_iou = -1.0;
                for (g, gt) in im.gts.iter().enumerate() {
                    let iou = count_iou(&im.detections[d].mask, &gt.mask);
                    if !taken[g] && iou >= thr && iou > best_iou {
                        best = Some(g);
                        best_iou = iou;
                    }
                }
                if let Some(g) = best {
                    taken[g] = true;
                    tp[d] = true;
                }
            }
            for (d, det) in im.detections.iter().enumerate() {
                flat.push((det.score, k, d, tp[d]));
            }
        }
        flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut pr = Vec::new();
        let mut tp = 0usize;
        for (i, e) in flat.iter().enumerate() {
            tp += e.3 as usize;
            pr.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
        }
        let mut total = 0.0;
        for k in 0..101 {
            let r = k as f64 / 100.0;
            let p = pr.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(None, |m: Option<f64>, p| {
                Some(m.map_or(p, |m| m.max(p)))
            });
            total += p.unwrap_or(0.0);
        }
        per.push(total / 101.0);
    }
    Some(per.iter().sum::<f64>() / per.len() as f64)
}

fn random_image(rng: &mut ChaCha8Rng) -> ImageResult {
    let (h, w) = (12, 16);
    let k = rng.random_range(0..=4);
    let mut labels = Array2::<Label>::zeros((h, w));
    for id in 1..=k {
        let (r0, c0) = (rng.random_range(0..h - 3), rng.random_range(0..w - 3));
        let (r1, c1) = (rng.random_range(r0 + 2..=h), rng.random_range(c0 + 2..=w));
        labels.slice_mut(ndarray::s![r0..r1, c0..c1]).fill(id as Label);
    }
    let gts = GtInstance::from_labels(&labels);
    let mut detections = Vec::new();
    for g in &gts {
        if rng.random_bool(0.8) {
            // Jittered copy of the instance.
            let (dr, dc) = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
            let mask = Array2::from_shape_fn((h, w), |(r, c)| {
                let (rr, cc) = (r as i64 - dr, c as i64 - dc);
                rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && g.mask[[rr as usize, cc as usize]]
            });
            detections.push(Detection {
                bbox: bbox(&mask),
                mask,
                score: (rng.random_range(0..10) as f64) / 10.0,
            });
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let mask = Array2::from_shape_simple_fn((h, w), || rng.random_bool(0.3));
        detections.push(Detection {
            bbox: bbox(&mask),
            mask,
            score: (rng.random_range(0..10) as f64) / 10.0,
        });
    }
    ImageResult { detections, gts }
}

fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(r, c)| r >= r0 && r < r1 && c >= c0 && c < c1)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in 0..200 {
        let images: Vec<ImageResult> = (0..rng.random_range(1..4)).map(|_| random_image(&mut rng)).collect();
        let got = average_precision(&images, false).ap;
        let want = brute_ap(&images);
        ensure(got == want, || format!("scene set {s}: AP {got:?} vs brute force {want:?}"))?;
    }

    let gt = Array2::from_shape_fn((4, 5), |(r, c)| 1.0 + 0.25 * (r + c) as f64);
    let m = depth_metrics(&gt, &gt).map_err(|e| e.to_string())?.ok_or("no depth")?;
    let id = (m.rel, m.log10, m.rms, m.delta1, m.delta2, m.delta3);
    ensure(id == (0.0, 0.0, 0.0, 1.0, 1.0, 1.0), || format!("identity gives {id:?}"))?;
    // Depths for which 1.1·d is exact in binary floating point.
    let gt = Array2::from_shape_vec((1, 2), vec![10.0, 20.0]).unwrap();
    let m = depth_metrics(&gt.mapv(|d| d * 1.1), &gt).map_err(|e| e.to_string())?.ok_or("no depth")?;
    ensure(m.rel == 0.1, || format!("x1.1 gives rel {}", m.rel))?;

    let cfg = BoundaryIouConfig::default();
    let g = GtInstance {
        id: 1,
        mask: rect(10, 10, 2, 7, 2, 7),
        bbox: bbox(&rect(10, 10, 2, 7, 2, 7)),
    };
    let same = ImageResult {
        detections: vec![Detection::from_gt(&g, 0.5)],
        gts: vec![g.clone()],
    };
    let b1 = boundary_iou(&[same], &cfg);
    let miss = ImageResult {
        detections: vec![],
        gts: vec![g],
    };
    let b0 = boundary_iou(&[miss], &cfg);
    let a = rect(4, 8, 0, 1, 0, 8);
    let mut b = rect(4, 8, 0, 1, 0, 4);
    b.slice_mut(ndarray::s![2, 0..4]).fill(true);
    let third = boundary_set_iou(&a, &b);
    ensure(b1 == Some(1.0) && b0 == Some(0.0) && third == 1.0 / 3.0, || {
        format!("boundary IoU fixtures {b1:?} / {b0:?} / {third}")
    })?;
    Ok("AP equals brute force on 200 scene sets; depth and boundary IoU fixtures exact".into())
}

// ------------------------------------------------------------ 4. mechanism

/// One-sided Mann–Whitney test that `lo` tends to be smaller than `hi`
/// (normal approximation with tie correction). Returns the p-value.
fn mann_whitney_less(lo: &[f64], hi: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = lo.iter().map(|&v| (v, true)).chain(hi.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_lo = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_lo += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n1, n2) = (lo.len() as f64, hi.len() as f64);
    let u = rank_lo - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let nn = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    let z = (u - mean) / var.sqrt();
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}

pub const MECHANISM_SCENES: usize = 200;
pub const MECHANISM_RADIUS: usize = 4;
pub const MECHANISM_RATIO: f64 = 0.6;

fn mechanism() -> Outcome {
    let cfg = SceneConfig::default();
    let (mut displaced, mut genuine) = (Vec::new(), Vec::new());
    for i in 0..MECHANISM_SCENES {
        let seed = 10_000 + i as u64;
        let s = generate_scene(seed, &cfg).map_err(|e| e.to_string())?;
        let noisy = corrupt_boundaries(&s.labels, MECHANISM_RADIUS, seed).map_err(|e| e.to_string())?;
        let std = windowed_std_map(&sobel_gradient_mask(&s.depth).map_err(|e| e.to_string())?, 3)
            .map_err(|e| e.to_string())?;
        let dist = chebyshev_distance(&label_transitions(&s.labels));
        for id in instance_ids(&noisy) {
            let b = laplacian_boundary(&instance_mask(&noisy, id)).map_err(|e| e.to_string())?;
            let w = normalize_weights(&std, &b, WeightMode::GtBandOnly).map_err(|e| e.to_string())?;
            if w.degenerate {
                continue;
            }
            for p in b.pixels() {
                let v = w.weights.values[p];
                if dist[p] <= 1 {
                    genuine.push(v);
                } else {
                    displaced.push(v);
                }
            }
        }
    }
    ensure(!displaced.is_empty() && !genuine.is_empty(), || "empty pixel class".into())?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (md, mg) = (mean(&displaced), mean(&genuine));
    let ratio = md / mg;
    let p = mann_whitney_less(&displaced, &genuine);
    let detail = format!(
        "mean W displaced {md:.4} ({} px) vs on discontinuities {mg:.4} ({} px): ratio {ratio:.3} (<= {MECHANISM_RATIO}), one-sided p {p:.1e} (< 0.01)",
        displaced.len(),
        genuine.len()
    );
    ensure(p < 0.01 && ratio <= MECHANISM_RATIO, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------ 5./6. toy training

/// Toy training recipe shared by the two directional criteria.
fn toy_run(root: &Path, seed: u64, boundary: BoundaryLoss, variant: Variant) -> RunConfig {
    let mut cfg = RunConfig {
        dataset: root.join("data"),
        output_dir: root.join(format!("{boundary:?}-{variant}-{seed}")),
        seed,
        eval_scenes: TOY_EVAL,
        epochs: TOY_EPOCHS,
        batch_size: 8,
        net: NetConfig {
            backbone_channels: TOY_CHANNELS,
            mask_channels: TOY_HEAD,
            depth_channels: TOY_HEAD,
            head_channels: TOY_HEAD,
            variant,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.loss.boundary = boundary;
    cfg.optim.decay_epoch = Some(TOY_DECAY);
    cfg.generate.num_scenes = TOY_SCENES;
    cfg.generate.corruption_radius = TOY_RADIUS;
    cfg.generate.scene = SceneConfig {
        height: TOY_SIZE.0,
        width: TOY_SIZE.1,
        ..Default::default()
    };
    cfg
}

// The label noise must survive the stride-4 mask resolution to matter; at
// radius 4 it moves labels by one mask pixel at most and the boundary losses
// are indistinguishable.
const TOY_SIZE: (usize, usize) = (96, 128);
const TOY_SCENES: usize = 304;
const TOY_EVAL: usize = 48;
const TOY_EPOCHS: usize = 12;
const TOY_DECAY: usize = 9;
const TOY_RADIUS: usize = 8;
const TOY_CHANNELS: [usize; 3] = [8, 12, 16];
const TOY_HEAD: usize = 8;
const TOY_DATA_SEED: u64 = 0;
const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Default)]
struct Grid {
    /// (boundary, variant) -> per-seed (AP_m, Boundary IoU).
    runs: BTreeMap<(String, String), Vec<(f64, f64)>>,
}

fn train_grid(root: &Path) -> Result<Grid, String> {
    let base = toy_run(root, TOY_DATA_SEED, BoundaryLoss::Dgbpl, Variant::Xpd);
    generate_dataset(&base.dataset, TOY_DATA_SEED, &base.generate).map_err(|e| e.to_string())?;
    let mut grid = Grid::default();
    let combos = [
        (BoundaryLoss::Dgbpl, Variant::Xpd),
        (BoundaryLoss::Vanilla, Variant::Xpd),
        (BoundaryLoss::Off, Variant::Xpd),
        (BoundaryLoss::Dgbpl, Variant::PadNet),
        (BoundaryLoss::Dgbpl, Variant::None),
    ];
    for &seed in &SEEDS {
        for &(b, v) in &combos {
            let cfg = toy_run(root, seed, b, v);
            let out = cmd_train(&cfg).map_err(|e| e.to_string())?;
            let r = out.report;
            let entry = (r.ap_m.unwrap_or(0.0), r.boundary_iou.unwrap_or(0.0));
            println!("    run boundary={b:?} variant={v} seed={seed}: AP_m {:.4} Boundary IoU {:.4}", entry.0, entry.1);
            grid.runs.entry((format!("{b:?}"), v.to_string())).or_default().push(entry);
        }
    }
    Ok(grid)
}

fn mean_of(v: &[(f64, f64)], f: impl Fn(&(f64, f64)) -> f64) -> f64 {
    v.iter().map(f).sum::<f64>() / v.len() as f64
}

fn boundary_ordering(grid: &Grid) -> Outcome {
    let get = |b: &str| grid.runs[&(b.to_string(), "xpd".to_string())].clone();
    let (d, v, o) = (get("Dgbpl"), get("Vanilla"), get("Off"));
    let (md, mv, mo) = (mean_of(&d, |e| e.1), mean_of(&v, |e| e.1), mean_of(&o, |e| e.1));
    let wins = d.iter().zip(&v).filter(|(a, b)| a.1 > b.1).count();
    let detail = format!(
        "Boundary IoU dgbpl {md:.4} / vanilla {mv:.4} / off {mo:.4}; dgbpl beats vanilla in {wins}/3 seeds"
    );
    ensure(md > mv && mv >= mo && wins >= 2, || detail.clone())?;
    Ok(detail)
}

fn variant_ordering(grid: &Grid) -> Outcome {
    let get = |v: &str| grid.runs[&("Dgbpl".to_string(), v.to_string())].clone();
    let (x, p, n) = (get("xpd"), get("pad_net"), get("none"));
    let (mx, mp, mn) = (mean_of(&x, |e| e.0), mean_of(&p, |e| e.0), mean_of(&n, |e| e.0));
    let detail = format!(
        "AP_m xpd {mx:.4} / pad_net {mp:.4} / none {mn:.4}; xpd - pad_net = {:+.4} (reported, not gated)",
        mx - mp
    );
    ensure(mx > mn && mp > mn, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ 7. baseline

fn baseline_equivalence() -> Outcome {
    let net_cfg = NetConfig {
        backbone_channels: [8, 12, 16],
        mask_channels: 8,
        depth_channels: 8,
        head_channels: 8,
        ..Default::default()
    };
    let mut xpd = XpdNet::new(net_cfg.clone(), 11).map_err(|e| e.to_string())?;
    xpd.zero_distillation();
    let mut none = XpdNet::new(
        NetConfig {
            variant: Variant::None,
            ..net_cfg
        },
        11,
    )
    .map_err(|e| e.to_string())?;
    for (name, t) in xpd.params.iter() {
        if let Some(id) = none.params.id(name) {
            *none.params.get_mut(id) = t.clone();
        }
    }
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let scene_cfg = SceneConfig::default();
    for i in 0..20 {
        let s = generate_scene(500 + i, &scene_cfg).map_err(|e| e.to_string())?;
        let x = Tensor::from_images(&[&s.rgb]).map_err(|e| e.to_string())?;
        let a = xpd.infer(&x).map_err(|e| e.to_string())?;
        let b = none.infer(&x).map_err(|e| e.to_string())?;
        for (name, u, v) in [
            ("scores", &a.seg.scores, &b.seg.scores),
            ("kernels", &a.seg.kernels, &b.seg.kernels),
            ("mask_feature", &a.seg.mask_feature, &b.seg.mask_feature),
            ("depth", &a.depth, &b.depth),
            ("aggregated", &a.aggregated, &b.aggregated),
        ] {
            ensure(bits(u) == bits(v), || format!("scene {i}: {name} differs"))?;
        }
    }
    Ok("20 scenes at 192x256: scores, kernels, mask feature, depth bit-identical".into())
}

// --------------------------------------------------------- 8. determinism

fn tree(root: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Outcome {
    let mut cfg = toy_run(root, 9, BoundaryLoss::Dgbpl, Variant::Xpd);
    cfg.generate.num_scenes = 24;
    cfg.eval_scenes = 8;
    cfg.epochs = 2;
    cfg.dataset = root.join("det-data-a");
    generate_dataset(&cfg.dataset, cfg.seed, &cfg.generate).map_err(|e| e.to_string())?;
    generate_dataset(&root.join("det-data-b"), cfg.seed, &cfg.generate).map_err(|e| e.to_string())?;
    ensure(tree(&cfg.dataset) == tree(&root.join("det-data-b")), || {
        "generated datasets differ".into()
    })?;
    let mut reports = Vec::new();
    for run in ["det-a", "det-b"] {
        cfg.output_dir = root.join(run);
        cmd_train(&cfg).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(cfg.output_dir.join("report.json")).map_err(|e| e.to_string())?);
    }
    ensure(reports[0] == reports[1], || "report.json differs between runs".into())?;
    Ok(format!("dataset of {} files byte-identical; report.json identical", tree(&cfg.dataset).len()))
}

// ------------------------------------------------------------------ driver

struct Line {
    id: &'static str,
    name: &'static str,
    budget: Duration,
    outcome: Outcome,
    elapsed: Duration,
}

fn timed(id: &'static str, name: &'static str, budget: Duration, f: impl FnOnce() -> Outcome) -> Line {
    let t = Instant::now();
    let outcome = f();
    let elapsed = t.elapsed();
    let line = Line {
        id,
        name,
        budget,
        outcome,
        elapsed,
    };
    print_line(&line);
    line
}

fn passed(l: &Line) -> bool {
    l.outcome.is_ok() && l.elapsed <= l.budget
}

fn print_line(l: &Line) {
    let verdict = if passed(l) { "PASS" } else { "FAIL" };
    let detail = match &l.outcome {
        Ok(s) | Err(s) => s,
    };
    let over = if l.elapsed > l.budget {
        format!(" [over budget {:.0?}]", l.budget)
    } else {
        String::new()
    };
    println!(
        "[{verdict}] {}. {}: {detail} ({:.1?}){over}",
        l.id, l.name, l.elapsed
    );
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let min = |m: u64| Duration::from_secs(60 * m);
    let mut lines = vec![
        timed("1", "raster oracles", Duration::from_secs(10), raster_oracles),
        timed("2", "gradient suite", min(5), gradient_suite),
        timed("3", "metric oracles", min(1), metric_oracles),
        timed("4", "depth-guided weights separate displaced boundaries", min(2), mechanism),
    ];

    let t = Instant::now();
    let grid = train_grid(root);
    let per_model = t.elapsed() / 15;
    // Each criterion's budget is per model; the grid trains 15 models.
    let train_budget = min(30);
    for (id, name, f) in [
        ("5", "boundary loss ordering on clean labels", boundary_ordering as fn(&Grid) -> Outcome),
        ("6", "distillation variant ordering", variant_ordering),
    ] {
        let line = Line {
            id,
            name,
            budget: train_budget,
            outcome: grid.as_ref().map_err(|e| e.clone()).and_then(f),
            elapsed: per_model,
        };
        print_line(&line);
        lines.push(line);
    }

    lines.push(timed("7", "zeroed distillation equals the none variant", min(1), baseline_equivalence));
    lines.push(timed("8", "determinism", min(10), || determinism(root)));

    let failed: Vec<&str> = lines.iter().filter(|l| !passed(l)).map(|l| l.id).collect();
    println!("acceptance: {}/{} criteria pass", lines.len() - failed.len(), lines.len());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
