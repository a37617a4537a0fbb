//! Central finite-difference verification of the analytic gradients.
//!
//! A check evaluates a function of several input tensors, reduces a
//! non-scalar output with a fixed random projection, and compares the
//! backward-pass gradient with `(f(x + ε) − f(x − ε)) / 2ε` on a seeded
//! sample of entries of every input.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::distill::{attention_map, distill_message, dual_distill, merge_message, DistillationParams, Variant};
use crate::error::Result;
use crate::losses::{self, BoundaryLoss, LossConfig, NoConstraints, SampleTargets};
use crate::net::{NetConfig, XpdNet};
use crate::nn::{Bound, ParamSet};
use crate::raster::{self, WeightMode};
use crate::scene::{generate_scene, SceneConfig};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const TOL_END_TO_END: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub entries: usize,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub struct Check<'a> {
    pub name: &'a str,
    pub inputs: Vec<Tensor>,
    pub tolerance: f64,
    /// Entries sampled per input tensor (all entries when the tensor is
    /// smaller).
    pub samples: usize,
    pub seed: u64,
}

fn evaluate<F>(f: &F, inputs: &[Tensor], proj: &mut Option<Tensor>, seed: u64, track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { g.variable(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let root = if g.value(out).numel() == 1 {
        out
    } else {
        let p = proj.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
            let shape = g.shape(out);
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
        });
        let pv = g.constant(p.clone());
        let m = g.mul(out, pv)?;
        g.sum(m)
    };
    Ok((g, vars, root))
}

impl Check<'_> {
    pub fn run<F>(&self, f: F) -> Result<CheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        self.run_with(f, |_| {})
    }

    /// Like [`run`](Self::run), but lets the caller tamper with the analytic
    /// gradients before comparison (negative control).
    pub fn run_with<F>(&self, f: F, tamper: impl Fn(&mut [Tensor])) -> Result<CheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut proj = None;
        let (g, vars, root) = evaluate(&f, &self.inputs, &mut proj, self.seed, true)?;
        let mut grads = g.backward(root)?;
        let mut analytic: Vec<Tensor> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        tamper(&mut analytic);

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut worst = 0.0f64;
        let mut entries = 0;
        let mut perturbed = self.inputs.clone();
        for k in 0..self.inputs.len() {
            let n = self.inputs[k].numel();
            let picks: Vec<usize> = if n <= self.samples {
                (0..n).collect()
            } else {
                (0..self.samples).map(|_| rng.random_range(0..n)).collect()
            };
            for i in picks {
                let x = self.inputs[k].data()[i];
                perturbed[k].data_mut()[i] = x + EPS;
                let (gp, _, rp) = evaluate(&f, &perturbed, &mut proj, self.seed, false)?;
                perturbed[k].data_mut()[i] = x - EPS;
                let (gm, _, rm) = evaluate(&f, &perturbed, &mut proj, self.seed, false)?;
                perturbed[k].data_mut()[i] = x;
                let numeric = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * EPS);
                let e = rel_err(analytic[k].data()[i], numeric);
                worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
                entries += 1;
            }
        }
        Ok(CheckReport {
            name: self.name.to_string(),
            max_rel_err: worst,
            tolerance: self.tolerance,
            entries,
            passed: worst < self.tolerance,
        })
    }
}

fn random_tensor(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn inputs_with_params(first: Vec<Tensor>, params: &ParamSet) -> Vec<Tensor> {
    first
        .into_iter()
        .chain(params.iter().map(|(_, t)| t.clone()))
        .collect()
}

fn tiny_net(variant: Variant) -> Result<XpdNet> {
    XpdNet::new(
        NetConfig {
            backbone_channels: [4, 6, 8],
            mask_channels: 4,
            depth_channels: 4,
            head_channels: 4,
            variant,
            depth_init: 3.0,
        },
        17,
    )
}

/// Perturbs every parameter so zero-initialised layers get non-trivial
/// gradients and values.
fn jitter(params: &mut ParamSet, rng: &mut ChaCha8Rng, amp: f64) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

fn soft_mask_pair(h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Tensor) {
    let gt = Array2::from_shape_fn((h, w), |(r, c)| if r + c < (h + w) / 2 { 1.0 } else { 0.0 });
    let pr = random_tensor([1, 1, h, w], 0.2, 0.8, rng);
    (gt, pr)
}

/// Every check of the suite, in a fixed order.
pub fn standard_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // Distillation.
    for (name, variant) in [
        ("attention_map", Variant::Xpd),
        ("distill_message/xpd", Variant::Xpd),
        ("distill_message/pad_net", Variant::PadNet),
    ] {
        let mut ps = ParamSet::new();
        let p = DistillationParams::new(&mut ps, "m", 3, 8, variant, &mut rng)?;
        let f = random_tensor([2, 3, 13, 14], -1.0, 1.0, &mut rng);
        let check = Check {
            name,
            inputs: inputs_with_params(vec![f], &ps),
            tolerance: TOL,
            samples: 12,
            seed: 1,
        };
        let attention_only = name == "attention_map";
        out.push(check.run(|g, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            if attention_only {
                attention_map(g, &b, v[0], &p)
            } else {
                distill_message(g, &b, v[0], &p)
            }
        })?);
    }
    out.push(
        Check {
            name: "merge_message",
            inputs: vec![
                random_tensor([1, 4, 5, 5], -1.0, 1.0, &mut rng),
                random_tensor([1, 4, 5, 5], -1.0, 1.0, &mut rng),
            ],
            tolerance: TOL,
            samples: 20,
            seed: 2,
        }
        .run(|g, v| merge_message(g, v[0], v[1]))?,
    );
    {
        let mut ps = ParamSet::new();
        let s2d = DistillationParams::new(&mut ps, "s2d", 4, 8, Variant::Xpd, &mut rng)?;
        let d2s = DistillationParams::new(&mut ps, "d2s", 8, 4, Variant::Xpd, &mut rng)?;
        let seg = random_tensor([1, 4, 13, 13], -1.0, 1.0, &mut rng);
        let depth = random_tensor([1, 8, 13, 13], -1.0, 1.0, &mut rng);
        out.push(
            Check {
                name: "dual_distill",
                inputs: inputs_with_params(vec![seg, depth], &ps),
                tolerance: TOL,
                samples: 8,
                seed: 3,
            }
            .run(|g, v| {
                let b = Bound::from_vars(v[2..].to_vec());
                let (s, d) = dual_distill(g, &b, v[0], v[1], &s2d, &d2s)?;
                let ss = g.square(s);
                let a = g.sum(ss);
                let dd = g.sum(d);
                g.add(a, dd)
            })?,
        );
    }

    // Network heads on a 32x32 image.
    let mut net = tiny_net(Variant::Xpd)?;
    jitter(&mut net.params, &mut rng, 0.05);
    let img = random_tensor([1, 3, 32, 32], 0.0, 1.0, &mut rng);
    for name in ["seg_head", "depth_head"] {
        let check = Check {
            name,
            inputs: inputs_with_params(vec![img.clone()], &net.params),
            tolerance: TOL,
            samples: 4,
            seed: 4,
        };
        let net = &net;
        out.push(check.run(|g, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            let o = net.forward(g, &b, v[0])?;
            if name == "seg_head" {
                let k = g.sum(o.kernels);
                let s = g.sigmoid(o.score_logits);
                let s = g.sum(s);
                g.add(k, s)
            } else {
                Ok(o.depth)
            }
        })?);
    }

    // Boundary losses w.r.t. the soft predicted mask.
    let (gt, pr) = soft_mask_pair(10, 12, &mut rng);
    let bt = Tensor::from_map(&raster::laplacian_boundary(&gt)?.values);
    out.push(
        Check {
            name: "vanilla_boundary_loss",
            inputs: vec![pr.clone()],
            tolerance: TOL,
            samples: 200,
            seed: 5,
        }
        .run(|g, v| losses::vanilla_boundary_term(g, v[0], &bt))?,
    );
    let depth = Array2::from_shape_fn((10, 12), |(r, c)| if c < 6 { 2.0 + 0.05 * r as f64 } else { 3.0 });
    let std_map = raster::windowed_std_map(&raster::sobel_gradient_mask(&depth)?, losses::STD_WINDOW)?;
    for (name, mode, sq) in [
        ("dgbpl/full_field", WeightMode::FullField, true),
        ("dgbpl/gt_band_only", WeightMode::GtBandOnly, true),
        ("dgbpl/unsquared", WeightMode::FullField, false),
    ] {
        let w = Tensor::from_map(&losses::boundary_weights(&std_map, &gt, mode)?);
        out.push(
            Check {
                name,
                inputs: vec![pr.clone()],
                tolerance: TOL,
                samples: 200,
                seed: 6,
            }
            .run(|g, v| losses::dgbpl_term(g, v[0], &bt, &w, sq))?,
        );
    }
    {
        let targets = Tensor::from_map(&gt);
        out.push(
            Check {
                name: "dice",
                inputs: vec![pr.clone()],
                tolerance: TOL,
                samples: 200,
                seed: 7,
            }
            .run(|g, v| g.dice_loss(v[0], targets.clone()))?,
        );
        let cells = random_tensor([1, 1, 3, 4], 0.0, 1.0, &mut rng).map_values(|x| (x > 0.7) as u8 as f64);
        out.push(
            Check {
                name: "focal",
                inputs: vec![random_tensor([1, 1, 3, 4], -3.0, 3.0, &mut rng)],
                tolerance: TOL,
                samples: 12,
                seed: 8,
            }
            .run(|g, v| g.focal_loss(v[0], cells.clone(), losses::FOCAL_ALPHA, losses::FOCAL_GAMMA))?,
        );
    }

    // Composite objective end to end on a synthetic scene.
    let scene = generate_scene(
        5,
        &SceneConfig {
            height: 32,
            width: 32,
            ..Default::default()
        },
    )?;
    let rgb = Tensor::from_images(&[&scene.rgb])?;
    let cfg = LossConfig {
        boundary: BoundaryLoss::Dgbpl,
        ..Default::default()
    };
    let targets = losses::prepare_targets(
        &[SampleTargets {
            labels: &scene.labels,
            depth: &scene.depth,
        }],
        &cfg,
    )?;
    {
        let net = &net;
        out.push(
            Check {
                name: "composite/end_to_end",
                inputs: inputs_with_params(vec![rgb], &net.params),
                tolerance: TOL_END_TO_END,
                samples: 3,
                seed: 9,
            }
            .run(|g, v| {
                let b = Bound::from_vars(v[1..].to_vec());
                let o = net.forward(g, &b, v[0])?;
                Ok(losses::composite_loss(g, &o, &targets, &cfg, &NoConstraints)?.total)
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes_and_tampered_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let check = Check {
            name: "square",
            inputs: vec![random_tensor([1, 2, 3, 3], -1.0, 1.0, &mut rng)],
            tolerance: TOL,
            samples: 50,
            seed: 0,
        };
        let f = |g: &mut Graph, v: &[Var]| Ok(g.square(v[0]));
        assert!(check.run(f).unwrap().passed);
        let bad = check
            .run_with(f, |a| a[0].data_mut()[3] *= 1.01)
            .unwrap();
        assert!(!bad.passed);
        assert!(bad.max_rel_err > 1e-3);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(rel_err(1e-9, 0.0), 1e-3);
    }
}
