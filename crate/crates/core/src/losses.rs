//! Training objectives: focal and dice losses for instances, masked RMSE for
//! depth, boundary regression (plain or depth-weighted) and their weighted sum.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::net::{assign_targets, Outputs, GRID_STRIDE, MASK_STRIDE};
use crate::raster::{self, WeightMode, LAPLACIAN};
use crate::scene::Label;
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const STD_WINDOW: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryLoss {
    Off,
    Vanilla,
    #[default]
    Dgbpl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub focal: f64,
    pub dice: f64,
    pub rmse: f64,
    pub boundary: f64,
    pub constraints: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            focal: 1.0,
            dice: 1.0,
            rmse: 1.0,
            boundary: 1.0,
            constraints: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.focal, self.dice, self.rmse, self.boundary, self.constraints];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(config_err!("loss weights must be finite and non-negative, got {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub boundary: BoundaryLoss,
    pub weights: LossWeights,
    pub weight_mode: WeightMode,
    /// `true` keeps `mean((W·B_gt − W·B_pr)²)`; `false` uses `mean(W·(B_gt − B_pr)²)`.
    pub w_squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            boundary: BoundaryLoss::Dgbpl,
            weights: LossWeights::default(),
            weight_mode: WeightMode::FullField,
            w_squared: true,
        }
    }
}

/// Scalar value of every objective term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub dice: f64,
    pub rmse: f64,
    pub boundary: f64,
    pub constraints: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the components.
    pub fn combine(&self, w: &LossWeights) -> f64 {
        w.focal * self.focal
            + w.dice * self.dice
            + w.rmse * self.rmse
            + w.boundary * self.boundary
            + w.constraints * self.constraints
    }

    pub fn is_finite(&self) -> bool {
        [self.focal, self.dice, self.rmse, self.boundary, self.constraints, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Ground truth for one training image.
#[derive(Clone, Debug)]
pub struct SampleTargets<'a> {
    /// Full-resolution instance labels (possibly corrupted).
    pub labels: &'a Array2<Label>,
    /// Full-resolution depth in metres, 0 = invalid.
    pub depth: &'a Array2<f64>,
}

/// One positive `(cell, instance)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub item: usize,
    pub row: usize,
    pub col: usize,
    pub instance: Label,
}

/// Everything the loss needs that depends only on ground truth.
#[derive(Clone, Debug)]
pub struct BatchTargets {
    /// 0/1 per grid cell, `(B, 1, S_r, S_c)`.
    pub cells: Tensor,
    pub positives: Vec<Positive>,
    /// GT masks at mask resolution, `(P, 1, h, w)`.
    pub masks: Tensor,
    /// Laplacian boundaries of `masks`.
    pub boundaries: Tensor,
    /// Per-pair boundary weights; zero when unused.
    pub weights: Tensor,
    pub depth: Tensor,
    pub depth_valid: Tensor,
    pub valid_count: usize,
}

/// Per-image gradient mask and windowed std of pooled GT depth.
pub fn depth_std_map(depth: &Array2<f64>) -> Result<Array2<f64>> {
    let pooled = raster::pool_depth(depth, MASK_STRIDE)?;
    let g = raster::sobel_gradient_mask(&pooled)?;
    raster::windowed_std_map(&g, STD_WINDOW)
}

/// Weight map of one GT instance at mask resolution.
pub fn boundary_weights(std_map: &Array2<f64>, gt_mask: &Array2<f64>, mode: WeightMode) -> Result<Array2<f64>> {
    let b = raster::laplacian_boundary(gt_mask)?;
    Ok(raster::normalize_weights(std_map, &b, mode)?.weights.values)
}

pub fn prepare_targets(samples: &[SampleTargets<'_>], cfg: &LossConfig) -> Result<BatchTargets> {
    let first = samples
        .first()
        .ok_or_else(|| shape_err!("empty batch"))?;
    let (h, w) = first.labels.dim();
    if h % GRID_STRIDE != 0 || w % GRID_STRIDE != 0 {
        return Err(shape_err!("{h}x{w} not divisible by {GRID_STRIDE}"));
    }
    let grid = (h / GRID_STRIDE, w / GRID_STRIDE);
    let (mh, mw) = (h / MASK_STRIDE, w / MASK_STRIDE);
    let n = samples.len();
    let mut cells = Tensor::zeros([n, 1, grid.0, grid.1]);
    let mut positives = Vec::new();
    let mut masks = Vec::new();
    let mut bounds = Vec::new();
    let mut weights = Vec::new();
    let mut depth = Tensor::zeros([n, 1, h, w]);
    let mut valid = Tensor::zeros([n, 1, h, w]);
    let mut valid_count = 0;
    for (item, s) in samples.iter().enumerate() {
        if s.labels.dim() != (h, w) || s.depth.dim() != (h, w) {
            return Err(shape_err!("batch items must share size {h}x{w}"));
        }
        let small = raster::downsample_labels(s.labels, MASK_STRIDE)?;
        let std_map = match cfg.boundary {
            BoundaryLoss::Dgbpl => Some(depth_std_map(s.depth)?),
            _ => None,
        };
        for a in assign_targets(s.labels, grid, GRID_STRIDE) {
            let i = cells.index(item, 0, a.row, a.col);
            cells.data_mut()[i] = 1.0;
            positives.push(Positive {
                item,
                row: a.row,
                col: a.col,
                instance: a.instance,
            });
            let m = raster::instance_mask(&small, a.instance);
            bounds.push(raster::laplacian_boundary(&m)?.values);
            weights.push(match &std_map {
                Some(sm) => boundary_weights(sm, &m, cfg.weight_mode)?,
                None => Array2::zeros((mh, mw)),
            });
            masks.push(m);
        }
        for ((r, c), &d) in s.depth.indexed_iter() {
            let i = depth.index(item, 0, r, c);
            depth.data_mut()[i] = d;
            if d > 0.0 {
                valid.data_mut()[i] = 1.0;
                valid_count += 1;
            }
        }
    }
    let stack = |v: &[Array2<f64>]| -> Result<Tensor> {
        if v.is_empty() {
            Ok(Tensor::zeros([0, 1, mh, mw]))
        } else {
            Tensor::stack_maps(v)
        }
    };
    Ok(BatchTargets {
        cells,
        positives,
        masks: stack(&masks)?,
        boundaries: stack(&bounds)?,
        weights: stack(&weights)?,
        depth,
        depth_valid: valid,
        valid_count,
    })
}

/// Pluggable extra objective; the default contributes nothing.
pub trait ConstraintTerm {
    fn evaluate(&self, g: &mut Graph, out: &Outputs, targets: &BatchTargets) -> Result<Option<Var>>;
}

pub struct NoConstraints;

impl ConstraintTerm for NoConstraints {
    fn evaluate(&self, _: &mut Graph, _: &Outputs, _: &BatchTargets) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// `min(|L(p)|, 1)` on a soft mask stack.
pub fn boundary_map(g: &mut Graph, probs: Var) -> Var {
    let l = g.stencil3x3(probs, LAPLACIAN);
    let a = g.abs(l);
    g.min_scalar(a, 1.0)
}

/// Pixel mean of `(B_gt − B_pr)²`; with equal-size pairs this is also the
/// mean over pairs of per-pair means.
pub fn vanilla_boundary_term(g: &mut Graph, probs: Var, gt_boundaries: &Tensor) -> Result<Var> {
    let bp = boundary_map(g, probs);
    let bt = g.constant(gt_boundaries.clone());
    let d = g.sub(bt, bp)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Depth-guided reweighting of [`vanilla_boundary_term`].
pub fn dgbpl_term(g: &mut Graph, probs: Var, gt_boundaries: &Tensor, weights: &Tensor, w_squared: bool) -> Result<Var> {
    let bp = boundary_map(g, probs);
    let bt = g.constant(gt_boundaries.clone());
    let w = g.constant(weights.clone());
    let d = g.sub(bt, bp)?;
    let v = if w_squared {
        let wd = g.mul(w, d)?;
        g.square(wd)
    } else {
        let sq = g.square(d);
        g.mul(w, sq)?
    };
    Ok(g.mean(v))
}

/// `sqrt(Σ valid·(pred − gt)² / N_valid)`; 0 when nothing is valid.
pub fn rmse_term(g: &mut Graph, depth: Var, gt: &Tensor, valid: &Tensor, valid_count: usize) -> Result<Var> {
    if valid_count == 0 {
        log::warn!("no valid depth pixels; rmse contributes 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let t = g.constant(gt.clone());
    let m = g.constant(valid.clone());
    let d = g.sub(depth, t)?;
    let d = g.mul(d, m)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    let mse = g.scale(s, 1.0 / valid_count as f64);
    g.sqrt(mse)
}

/// Graph handles of every term plus their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub focal: Var,
    pub dice: Var,
    pub rmse: Var,
    pub boundary: Var,
    pub constraints: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            focal: g.value(self.focal).item(),
            dice: g.value(self.dice).item(),
            rmse: g.value(self.rmse).item(),
            boundary: g.value(self.boundary).item(),
            constraints: g.value(self.constraints).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Weighted sum of scalar terms.
pub fn composite(g: &mut Graph, terms: [Var; 5], w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let ws = [w.focal, w.dice, w.rmse, w.boundary, w.constraints];
    let mut total: Option<Var> = None;
    for (t, k) in terms.into_iter().zip(ws) {
        let s = g.scale(t, k);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(total.expect("five terms"))
}

/// Builds the full objective on top of a forward pass.
pub fn composite_loss(
    g: &mut Graph,
    out: &Outputs,
    targets: &BatchTargets,
    cfg: &LossConfig,
    constraints: &dyn ConstraintTerm,
) -> Result<LossVars> {
    cfg.weights.validate()?;
    let zero = |g: &mut Graph| g.constant(Tensor::scalar(0.0));
    let npos = targets.positives.len();
    let f = g.focal_loss(out.score_logits, targets.cells.clone(), FOCAL_ALPHA, FOCAL_GAMMA)?;
    let focal = g.scale(f, 1.0 / npos.max(1) as f64);

    let (dice, boundary) = if npos == 0 {
        (zero(g), zero(g))
    } else {
        let cells: Vec<[usize; 3]> = targets.positives.iter().map(|p| [p.item, p.row, p.col]).collect();
        let logits = g.dynamic_mask(out.kernels, out.mask_feature, &cells)?;
        let probs = g.sigmoid(logits);
        let dice = g.dice_loss(probs, targets.masks.clone())?;
        let boundary = match cfg.boundary {
            BoundaryLoss::Off => zero(g),
            BoundaryLoss::Vanilla => vanilla_boundary_term(g, probs, &targets.boundaries)?,
            BoundaryLoss::Dgbpl => dgbpl_term(g, probs, &targets.boundaries, &targets.weights, cfg.w_squared)?,
        };
        (dice, boundary)
    };
    let rmse = rmse_term(g, out.depth, &targets.depth, &targets.depth_valid, targets.valid_count)?;
    let constraints = match constraints.evaluate(g, out, targets)? {
        Some(v) => v,
        None => zero(g),
    };
    let total = composite(g, [focal, dice, rmse, boundary, constraints], &cfg.weights)?;
    Ok(LossVars {
        focal,
        dice,
        rmse,
        boundary,
        constraints,
        total,
    })
}

fn check_pair(gt: &Array2<f64>, pr: &Array2<f64>) -> Result<()> {
    if gt.dim() != pr.dim() {
        return Err(shape_err!("gt {:?} vs prediction {:?}", gt.dim(), pr.dim()));
    }
    Ok(())
}

/// Boundary MSE of a single mask pair.
pub fn vanilla_boundary_loss(gt_mask: &Array2<f64>, pr_mask: &Array2<f64>) -> Result<f64> {
    check_pair(gt_mask, pr_mask)?;
    let bt = Tensor::from_map(&raster::laplacian_boundary(gt_mask)?.values);
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_map(pr_mask));
    let v = vanilla_boundary_term(&mut g, p, &bt)?;
    Ok(g.value(v).item())
}

/// Depth-weighted boundary loss of a single mask pair; `depth` is already at
/// mask resolution.
pub fn dgbpl(
    gt_mask: &Array2<f64>,
    pr_mask: &Array2<f64>,
    depth: &Array2<f64>,
    mode: WeightMode,
    w_squared: bool,
) -> Result<f64> {
    check_pair(gt_mask, pr_mask)?;
    check_pair(gt_mask, depth)?;
    let gm = raster::sobel_gradient_mask(depth)?;
    let std_map = raster::windowed_std_map(&gm, STD_WINDOW)?;
    let w = Tensor::from_map(&boundary_weights(&std_map, gt_mask, mode)?);
    let bt = Tensor::from_map(&raster::laplacian_boundary(gt_mask)?.values);
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_map(pr_mask));
    let v = dgbpl_term(&mut g, p, &bt, &w, w_squared)?;
    Ok(g.value(v).item())
}
