//! The toy dual-branch network: a small residual backbone, a single-stage
//! plane-instance head with dynamic mask kernels, a top-down depth decoder and
//! the distillation exchange between the two stride-4 features.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::distill::{dual_distill, DistillationParams, Variant};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{Bound, Conv, Init, ParamId, ParamSet};
use crate::scene::Label;
use crate::tensor::Tensor;

/// Backbone output stride at the instance grid.
pub const GRID_STRIDE: usize = 16;
/// Stride of the mask feature and the aggregated depth feature.
pub const MASK_STRIDE: usize = 4;
/// Minimum predicted depth in metres.
pub const DEPTH_FLOOR: f64 = 0.01;
/// Prior probability of a positive cell at initialisation.
pub const SCORE_PRIOR: f64 = 0.01;
/// Half-extent of the positive region around an instance centroid, as a
/// fraction of its bounding-box size.
pub const CENTER_REGION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Channels of P2, P3 and P4.
    pub backbone_channels: [usize; 3],
    /// Mask-feature and dynamic-kernel width.
    pub mask_channels: usize,
    /// Width of the depth decoder and its aggregated feature.
    pub depth_channels: usize,
    /// Width of the category and kernel towers.
    pub head_channels: usize,
    pub variant: Variant,
    /// Initial depth output in metres (sets the depth head bias).
    pub depth_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            backbone_channels: [64, 128, 256],
            mask_channels: 32,
            depth_channels: 64,
            head_channels: 64,
            variant: Variant::Xpd,
            depth_init: 3.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.iter().any(|&c| c < 2)
            || self.mask_channels == 0
            || self.depth_channels == 0
            || self.head_channels == 0
        {
            return Err(config_err!("network channel widths must be positive"));
        }
        if self.variant == Variant::Xpd && (self.mask_channels % 4 != 0 || self.depth_channels % 4 != 0) {
            return Err(config_err!(
                "xpd distillation needs mask_channels and depth_channels divisible by 4"
            ));
        }
        if !(self.depth_init > DEPTH_FLOOR) || !self.depth_init.is_finite() {
            return Err(config_err!("depth_init must exceed {DEPTH_FLOOR} m"));
        }
        Ok(())
    }

    /// Stable hash of everything that determines the parameter layout.
    pub fn arch_hash(&self) -> String {
        let desc = format!(
            "xpdnet/v1 backbone={:?} mask={} depth={} head={} variant={} hook=stride4-pre-head",
            self.backbone_channels, self.mask_channels, self.depth_channels, self.head_channels, self.variant
        );
        Sha256::digest(desc.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Residual {
    a: Conv,
    b: Conv,
}

impl Residual {
    fn new(p: &mut ParamSet, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Residual {
            a: Conv::same(p, &format!("{name}.a"), c, c, 3, Init::He, rng)?,
            // Zero-initialised residual branch: the block starts as identity.
            b: Conv::same(p, &format!("{name}.b"), c, c, 3, Init::Zero, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, bd: &Bound, x: Var) -> Result<Var> {
        let h = self.a.forward(g, bd, x)?;
        let h = g.relu(h);
        let h = self.b.forward(g, bd, h)?;
        let s = g.add(x, h)?;
        Ok(g.relu(s))
    }
}

#[derive(Clone, Debug)]
struct Layers {
    stem: Conv,
    down2: Conv,
    res2: Residual,
    down3: Conv,
    res3: Residual,
    down4: Conv,
    res4: Residual,
    lat: [Conv; 3],
    mask_a: Conv,
    mask_b: Conv,
    dec_lat: [Conv; 3],
    dec3: Conv,
    dec2: Conv,
    s2d: DistillationParams,
    d2s: DistillationParams,
    cate: [Conv; 3],
    kern: [Conv; 3],
    depth_head: Conv,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
    /// Mask feature before the distillation exchange.
    pub seg_feature: Var,
    /// Aggregated depth feature before the exchange.
    pub depth_feature: Var,
    /// Post-exchange mask feature, `(B, E, H/4, W/4)`.
    pub mask_feature: Var,
    /// Post-exchange aggregated depth feature, `(B, D, H/4, W/4)`.
    pub aggregated: Var,
    /// Plane-ness logits per grid cell, `(B, 1, H/16, W/16)`.
    pub score_logits: Var,
    /// Dynamic kernels, `(B, E, H/16, W/16)`.
    pub kernels: Var,
    /// Metric depth, `(B, 1, H, W)`.
    pub depth: Var,
}

/// Evaluated segmentation outputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutputs {
    /// Probabilities, `(B, 1, S_r, S_c)`.
    pub scores: Tensor,
    pub kernels: Tensor,
    pub mask_feature: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub seg: SegOutputs,
    /// `(B, 1, H, W)`.
    pub depth: Tensor,
    /// `(B, D, H/4, W/4)`.
    pub aggregated: Tensor,
}

#[derive(Clone, Debug)]
pub struct XpdNet {
    pub config: NetConfig,
    pub params: ParamSet,
    layers: Layers,
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1), stable for large y.
    y + (-(-y).exp_m1()).ln()
}

/// Normalised `x` and `y` coordinate planes in `[-1, 1]`, `(n, 2, h, w)`.
pub fn coord_channels(n: usize, h: usize, w: usize) -> Tensor {
    let lin = |i: usize, len: usize| {
        if len > 1 {
            -1.0 + 2.0 * i as f64 / (len - 1) as f64
        } else {
            0.0
        }
    };
    let mut t = Tensor::zeros([n, 2, h, w]);
    for b in 0..n {
        for r in 0..h {
            for c in 0..w {
                let i = t.index(b, 0, r, c);
                t.data_mut()[i] = lin(c, w);
                let j = t.index(b, 1, r, c);
                t.data_mut()[j] = lin(r, h);
            }
        }
    }
    t
}

impl XpdNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let [c2, c3, c4] = config.backbone_channels;
        let (e, d, hc) = (config.mask_channels, config.depth_channels, config.head_channels);
        let r = &mut rng;
        let strided = |p: &mut ParamSet, name: &str, cin, cout, r: &mut ChaCha8Rng| {
            Conv::new(p, name, cin, cout, 3, ConvSpec::strided(3, 2), Init::He, r)
        };
        let stem = strided(&mut p, "backbone.stem", 3, c2.div_ceil(2), r)?;
        let down2 = strided(&mut p, "backbone.down2", c2.div_ceil(2), c2, r)?;
        let res2 = Residual::new(&mut p, "backbone.res2", c2, r)?;
        let down3 = strided(&mut p, "backbone.down3", c2, c3, r)?;
        let res3 = Residual::new(&mut p, "backbone.res3", c3, r)?;
        let down4 = strided(&mut p, "backbone.down4", c3, c4, r)?;
        let res4 = Residual::new(&mut p, "backbone.res4", c4, r)?;

        let lat = [
            Conv::same(&mut p, "mask.lat2", c2, e, 1, Init::FanIn, r)?,
            Conv::same(&mut p, "mask.lat3", c3, e, 1, Init::FanIn, r)?,
            Conv::same(&mut p, "mask.lat4", c4, e, 1, Init::FanIn, r)?,
        ];
        let mask_a = Conv::same(&mut p, "mask.conv_a", e + 2, e, 3, Init::He, r)?;
        let mask_b = Conv::same(&mut p, "mask.conv_b", e, e, 3, Init::FanIn, r)?;

        let dec_lat = [
            Conv::same(&mut p, "decoder.lat2", c2, d, 1, Init::FanIn, r)?,
            Conv::same(&mut p, "decoder.lat3", c3, d, 1, Init::FanIn, r)?,
            Conv::same(&mut p, "decoder.lat4", c4, d, 1, Init::FanIn, r)?,
        ];
        let dec3 = Conv::same(&mut p, "decoder.conv3", d, d, 3, Init::He, r)?;
        let dec2 = Conv::same(&mut p, "decoder.conv2", d, d, 3, Init::He, r)?;

        let s2d = DistillationParams::new(&mut p, "distill.s2d", e, d, config.variant, r)?;
        let d2s = DistillationParams::new(&mut p, "distill.d2s", d, e, config.variant, r)?;

        let cate = [
            Conv::same(&mut p, "head.cate_a", c4, hc, 3, Init::He, r)?,
            Conv::same(&mut p, "head.cate_b", hc, hc, 3, Init::He, r)?,
            Conv::same(&mut p, "head.cate_out", hc, 1, 1, Init::FanIn, r)?,
        ];
        let kern = [
            Conv::same(&mut p, "head.kern_a", c4 + 2, hc, 3, Init::He, r)?,
            Conv::same(&mut p, "head.kern_b", hc, hc, 3, Init::He, r)?,
            Conv::same(&mut p, "head.kern_out", hc, e, 1, Init::FanIn, r)?,
        ];
        let depth_head = Conv::same(&mut p, "head.depth", d, 1, 3, Init::FanIn, r)?;

        cate[2].set_bias(&mut p, -((1.0 - SCORE_PRIOR) / SCORE_PRIOR).ln());
        depth_head.set_bias(&mut p, inverse_softplus(config.depth_init - DEPTH_FLOOR));
        // Small output kernels so initial depth is close to depth_init.
        for v in p.get_mut(depth_head.weight).data_mut() {
            *v *= 0.1;
        }

        Ok(XpdNet {
            config,
            params: p,
            layers: Layers {
                stem,
                down2,
                res2,
                down3,
                res3,
                down4,
                res4,
                lat,
                mask_a,
                mask_b,
                dec_lat,
                dec3,
                dec2,
                s2d,
                d2s,
                cate,
                kern,
                depth_head,
            },
        })
    }

    pub fn distillation(&self) -> (&DistillationParams, &DistillationParams) {
        (&self.layers.s2d, &self.layers.d2s)
    }

    /// Parameters of the segmentation side (mask feature, category and kernel
    /// towers) and of the depth side (decoder and depth head).
    pub fn branch_params(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        let l = &self.layers;
        let seg = l
            .lat
            .iter()
            .chain([&l.mask_a, &l.mask_b])
            .chain(&l.cate)
            .chain(&l.kern)
            .flat_map(Conv::param_ids)
            .collect();
        let depth = l
            .dec_lat
            .iter()
            .chain([&l.dec3, &l.dec2, &l.depth_head])
            .flat_map(Conv::param_ids)
            .collect();
        (seg, depth)
    }

    /// Zeroes the feature kernels of both distillation modules.
    pub fn zero_distillation(&mut self) {
        self.layers.s2d.zero_feature_kernels(&mut self.params);
        self.layers.d2s.zero_feature_kernels(&mut self.params);
    }

    /// Zeroes the category, kernel and depth output layers.
    pub fn zero_output_layers(&mut self) {
        let l = &self.layers;
        for c in [&l.cate[2], &l.kern[2], &l.depth_head] {
            c.zero(&mut self.params);
        }
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [n, c, h, w] = shape;
        if n == 0 || c != 3 {
            return Err(shape_err!("expected (B >= 1, 3, H, W) input, got {shape:?}"));
        }
        if h == 0 || w == 0 || h % GRID_STRIDE != 0 || w % GRID_STRIDE != 0 {
            return Err(shape_err!(
                "input {h}x{w} is not divisible by {GRID_STRIDE}"
            ));
        }
        Ok(())
    }

    pub fn backbone_forward(&self, g: &mut Graph, bd: &Bound, rgb: Var) -> Result<(Var, Var, Var)> {
        self.check_input(g.shape(rgb))?;
        let l = &self.layers;
        let x = l.stem.forward(g, bd, rgb)?;
        let x = g.relu(x);
        let x = l.down2.forward(g, bd, x)?;
        let x = g.relu(x);
        let p2 = l.res2.forward(g, bd, x)?;
        let x = l.down3.forward(g, bd, p2)?;
        let x = g.relu(x);
        let p3 = l.res3.forward(g, bd, x)?;
        let x = l.down4.forward(g, bd, p3)?;
        let x = g.relu(x);
        let p4 = l.res4.forward(g, bd, x)?;
        Ok((p2, p3, p4))
    }

    /// Pre-exchange mask feature: 1×1 laterals summed at stride 4, coordinate
    /// channels appended, then two 3×3 convs.
    pub fn mask_feature_forward(&self, g: &mut Graph, bd: &Bound, p: (Var, Var, Var)) -> Result<Var> {
        let l = &self.layers;
        let a = l.lat[0].forward(g, bd, p.0)?;
        let b = l.lat[1].forward(g, bd, p.1)?;
        let b = g.upsample_nearest(b, 2);
        let c = l.lat[2].forward(g, bd, p.2)?;
        let c = g.upsample_nearest(c, 4);
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        let [n, _, h, w] = g.shape(s);
        let coords = g.constant(coord_channels(n, h, w));
        let x = g.concat(&[s, coords])?;
        let x = l.mask_a.forward(g, bd, x)?;
        let x = g.relu(x);
        l.mask_b.forward(g, bd, x)
    }

    /// Pre-exchange aggregated depth feature from the top-down decoder.
    pub fn depth_decoder_forward(&self, g: &mut Graph, bd: &Bound, p: (Var, Var, Var)) -> Result<Var> {
        let l = &self.layers;
        let d4 = l.dec_lat[2].forward(g, bd, p.2)?;
        let up = g.upsample_nearest(d4, 2);
        let skip = l.dec_lat[1].forward(g, bd, p.1)?;
        let s = g.add(up, skip)?;
        let d3 = l.dec3.forward(g, bd, s)?;
        let d3 = g.relu(d3);
        let up = g.upsample_nearest(d3, 2);
        let skip = l.dec_lat[0].forward(g, bd, p.0)?;
        let s = g.add(up, skip)?;
        let d2 = l.dec2.forward(g, bd, s)?;
        Ok(g.relu(d2))
    }

    /// Category logits and dynamic kernels on the P4 grid.
    pub fn seg_head_forward(&self, g: &mut Graph, bd: &Bound, p4: Var) -> Result<(Var, Var)> {
        let l = &self.layers;
        let x = l.cate[0].forward(g, bd, p4)?;
        let x = g.relu(x);
        let x = l.cate[1].forward(g, bd, x)?;
        let x = g.relu(x);
        let logits = l.cate[2].forward(g, bd, x)?;

        let [n, _, h, w] = g.shape(p4);
        let coords = g.constant(coord_channels(n, h, w));
        let x = g.concat(&[p4, coords])?;
        let x = l.kern[0].forward(g, bd, x)?;
        let x = g.relu(x);
        let x = l.kern[1].forward(g, bd, x)?;
        let x = g.relu(x);
        let kernels = l.kern[2].forward(g, bd, x)?;
        Ok((logits, kernels))
    }

    /// Depth head on the post-exchange aggregated feature.
    pub fn depth_head_forward(&self, g: &mut Graph, bd: &Bound, aggregated: Var) -> Result<Var> {
        let x = self.layers.depth_head.forward(g, bd, aggregated)?;
        let x = g.upsample_bilinear(x, MASK_STRIDE);
        let x = g.softplus(x);
        Ok(g.add_scalar(x, DEPTH_FLOOR))
    }

    pub fn forward(&self, g: &mut Graph, bd: &Bound, rgb: Var) -> Result<Outputs> {
        let (p2, p3, p4) = self.backbone_forward(g, bd, rgb)?;
        let seg_feature = self.mask_feature_forward(g, bd, (p2, p3, p4))?;
        let depth_feature = self.depth_decoder_forward(g, bd, (p2, p3, p4))?;
        let (mask_feature, aggregated) =
            dual_distill(g, bd, seg_feature, depth_feature, &self.layers.s2d, &self.layers.d2s)?;
        let (score_logits, kernels) = self.seg_head_forward(g, bd, p4)?;
        let depth = self.depth_head_forward(g, bd, aggregated)?;
        Ok(Outputs {
            p2,
            p3,
            p4,
            seg_feature,
            depth_feature,
            mask_feature,
            aggregated,
            score_logits,
            kernels,
            depth,
        })
    }

    /// Forward pass with frozen parameters.
    pub fn infer(&self, rgb: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let bd = self.params.bind_frozen(&mut g);
        let x = g.constant(rgb.clone());
        let out = self.forward(&mut g, &bd, x)?;
        Ok(Prediction {
            seg: SegOutputs {
                scores: g.value(out.score_logits).map_values(crate::autograd::sigmoid),
                kernels: g.value(out.kernels).clone(),
                mask_feature: g.value(out.mask_feature).clone(),
            },
            depth: g.value(out.depth).clone(),
            aggregated: g.value(out.aggregated).clone(),
        })
    }
}

/// A grid cell assigned to a ground-truth instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub row: usize,
    pub col: usize,
    pub instance: Label,
}

struct InstanceStats {
    id: Label,
    area: usize,
    sum_r: f64,
    sum_c: f64,
    min_r: usize,
    max_r: usize,
    min_c: usize,
    max_c: usize,
}

/// Assigns every instance to the grid cells whose centres fall inside its
/// centre region (centroid ± [`CENTER_REGION`] × bounding-box extent). An
/// instance whose region contains no cell centre gets the cell holding its
/// centroid. A cell claimed by several instances goes to the smallest.
pub fn assign_targets(labels: &Array2<Label>, grid: (usize, usize), cell: usize) -> Vec<Assignment> {
    let mut stats: Vec<InstanceStats> = Vec::new();
    for ((r, c), &l) in labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        let s = match stats.iter_mut().find(|s| s.id == l) {
            Some(s) => s,
            None => {
                stats.push(InstanceStats {
                    id: l,
                    area: 0,
                    sum_r: 0.0,
                    sum_c: 0.0,
                    min_r: r,
                    max_r: r,
                    min_c: c,
                    max_c: c,
                });
                stats.last_mut().expect("just pushed")
            }
        };
        s.area += 1;
        s.sum_r += r as f64;
        s.sum_c += c as f64;
        s.min_r = s.min_r.min(r);
        s.max_r = s.max_r.max(r);
        s.min_c = s.min_c.min(c);
        s.max_c = s.max_c.max(c);
    }
    // Larger instances first so smaller ones overwrite contested cells.
    stats.sort_by(|a, b| b.area.cmp(&a.area).then(b.id.cmp(&a.id)));
    let (gr, gc) = grid;
    let mut owner: Array2<Label> = Array2::zeros(grid);
    let half = (cell as f64 - 1.0) / 2.0;
    for s in &stats {
        let (cr, cc) = (s.sum_r / s.area as f64, s.sum_c / s.area as f64);
        let hr = CENTER_REGION * (s.max_r - s.min_r + 1) as f64;
        let hc = CENTER_REGION * (s.max_c - s.min_c + 1) as f64;
        let mut any = false;
        for r in 0..gr {
            let y = (r * cell) as f64 + half;
            if (y - cr).abs() > hr {
                continue;
            }
            for c in 0..gc {
                let x = (c * cell) as f64 + half;
                if (x - cc).abs() <= hc {
                    owner[[r, c]] = s.id;
                    any = true;
                }
            }
        }
        if !any {
            let r = ((cr / cell as f64) as usize).min(gr.saturating_sub(1));
            let c = ((cc / cell as f64) as usize).min(gc.saturating_sub(1));
            owner[[r, c]] = s.id;
        }
    }
    owner
        .indexed_iter()
        .filter(|(_, &l)| l > 0)
        .map(|((row, col), &instance)| Assignment { row, col, instance })
        .collect()
}

/// Axis-aligned box in full-resolution pixels; `x1`/`y1` are exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    /// Tight box of the `true` pixels of a mask-resolution array, scaled by
    /// `scale`. `None` when the mask is empty.
    pub fn of_mask(mask: &Array2<bool>, scale: usize) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for ((r, c), &on) in mask.indexed_iter() {
            if !on {
                continue;
            }
            let e = b.get_or_insert(BBox {
                x0: c,
                y0: r,
                x1: c + 1,
                y1: r + 1,
            });
            e.x0 = e.x0.min(c);
            e.y0 = e.y0.min(r);
            e.x1 = e.x1.max(c + 1);
            e.y1 = e.y1.max(r + 1);
        }
        b.map(|e| BBox {
            x0: e.x0 * scale,
            y0: e.y0 * scale,
            x1: e.x1 * scale,
            y1: e.y1 * scale,
        })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let iw = self.x1.min(o.x1).saturating_sub(self.x0.max(o.x0));
        let ih = self.y1.min(o.y1).saturating_sub(self.y0.max(o.y0));
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    /// Soft mask at mask resolution.
    pub mask: Array2<f64>,
    pub score: f64,
    pub bbox: BBox,
}

impl InstancePrediction {
    pub fn binary(&self) -> Array2<bool> {
        binarize(&self.mask)
    }
}

pub fn binarize(mask: &Array2<f64>) -> Array2<bool> {
    mask.mapv(|v| v >= 0.5)
}

/// IoU of two binary masks; two empty masks give 1.
pub fn binary_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy NMS: visits candidates by descending score (ties by index) and keeps
/// one unless it overlaps a kept mask with IoU > `iou`. Returns kept indices
/// in visiting order.
pub fn greedy_nms(masks: &[Array2<bool>], scores: &[f64], iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| binary_iou(&masks[i], &masks[k]) <= iou) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_thresh: 0.1,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.score_thresh) || !open(self.nms_iou) {
            return Err(config_err!("score_thresh and nms_iou must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Decodes the instances of batch item `item`: cells at or above the score
/// threshold emit `sigmoid(kernel · mask_feature)`, then greedy mask NMS.
/// Masks that are empty after binarisation are dropped.
pub fn assemble_instances(seg: &SegOutputs, item: usize, cfg: &DecodeConfig) -> Result<Vec<InstancePrediction>> {
    cfg.validate()?;
    let [n, _, sr, sc] = seg.scores.shape();
    let [kn, e, kr, kc] = seg.kernels.shape();
    let [fn_, fe, h, w] = seg.mask_feature.shape();
    if item >= n || kn != n || fn_ != n || (kr, kc) != (sr, sc) || fe != e {
        return Err(shape_err!(
            "assemble_instances: scores {:?}, kernels {:?}, features {:?}, item {item}",
            seg.scores.shape(),
            seg.kernels.shape(),
            seg.mask_feature.shape()
        ));
    }
    let mut cand = Vec::new();
    for r in 0..sr {
        for c in 0..sc {
            let s = seg.scores.at(item, 0, r, c);
            if s >= cfg.score_thresh {
                cand.push((r, c, s));
            }
        }
    }
    cand.sort_by(|a, b| b.2.total_cmp(&a.2));
    let hw = h * w;
    let mut masks = Vec::with_capacity(cand.len());
    for &(r, c, _) in &cand {
        let mut logit = vec![0.0; hw];
        for k in 0..e {
            let coef = seg.kernels.at(item, k, r, c);
            let plane = &seg.mask_feature.data()[(item * e + k) * hw..(item * e + k + 1) * hw];
            for (d, s) in logit.iter_mut().zip(plane) {
                *d += coef * s;
            }
        }
        let soft = Array2::from_shape_vec((h, w), logit.into_iter().map(crate::autograd::sigmoid).collect())
            .expect("sized");
        masks.push(soft);
    }
    let bins: Vec<Array2<bool>> = masks.iter().map(binarize).collect();
    let scores: Vec<f64> = cand.iter().map(|c| c.2).collect();
    let mut out = Vec::new();
    for i in greedy_nms(&bins, &scores, cfg.nms_iou) {
        if out.len() == cfg.max_detections {
            break;
        }
        if let Some(bbox) = BBox::of_mask(&bins[i], MASK_STRIDE) {
            out.push(InstancePrediction {
                mask: masks[i].clone(),
                score: scores[i],
                bbox,
            });
        }
    }
    Ok(out)
}
