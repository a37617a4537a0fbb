//! Attention-gated cross-task distillation between the segmentation mask
//! feature and the depth decoder's aggregated feature.
//!
//! A message from a secondary-task feature `F` is
//!
//! ```text
//! A  = sigmoid(conv1x1(F))
//! F' = A ⊙ concat(conv3x3_d1(F), conv3x3_d3(F), conv3x3_d6(F), conv3x3_d12(F))
//! ```
//!
//! and is added to the primary-task feature. [`Variant::PadNet`] swaps the
//! dilated stack for one rate-1 convolution; [`Variant::None`] sends nothing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{Bound, Conv, Init, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const DILATION_RATES: [usize; 4] = [1, 3, 6, 12];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No cross-task message.
    None,
    /// Attention gate over a single 3×3 convolution.
    PadNet,
    /// Attention gate over the multi-rate dilated stack.
    #[default]
    Xpd,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::None => "none",
            Variant::PadNet => "pad_net",
            Variant::Xpd => "xpd",
        })
    }
}

/// Learnable state of one directed distillation module.
#[derive(Clone, Debug)]
pub struct DistillationParams {
    pub variant: Variant,
    pub c_src: usize,
    pub c_dst: usize,
    /// `W_m`: 1×1, `c_src → c_dst`. Absent for [`Variant::None`].
    pub attention: Option<Conv>,
    /// `W_f`: one conv per dilation rate (each `c_src → c_dst / 4`) for
    /// [`Variant::Xpd`], a single `c_src → c_dst` conv for [`Variant::PadNet`].
    pub features: Vec<Conv>,
}

impl DistillationParams {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        c_src: usize,
        c_dst: usize,
        variant: Variant,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_src == 0 || c_dst == 0 {
            return Err(config_err!("distillation channels must be positive"));
        }
        let (attention, features) = match variant {
            Variant::None => (None, vec![]),
            Variant::PadNet => {
                let att = Conv::same(params, &format!("{prefix}.attention"), c_src, c_dst, 1, Init::FanIn, rng)?;
                let f = Conv::same(params, &format!("{prefix}.feature"), c_src, c_dst, 3, Init::FanIn, rng)?;
                (Some(att), vec![f])
            }
            Variant::Xpd => {
                if c_dst % DILATION_RATES.len() != 0 {
                    return Err(config_err!(
                        "c_dst = {c_dst} must be divisible by {} for the dilated stack",
                        DILATION_RATES.len()
                    ));
                }
                let att = Conv::same(params, &format!("{prefix}.attention"), c_src, c_dst, 1, Init::FanIn, rng)?;
                let part = c_dst / DILATION_RATES.len();
                let feats = DILATION_RATES
                    .iter()
                    .map(|&rate| {
                        Conv::new(
                            params,
                            &format!("{prefix}.feature_d{rate}"),
                            c_src,
                            part,
                            3,
                            ConvSpec::same(3, rate),
                            Init::FanIn,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Some(att), feats)
            }
        };
        Ok(DistillationParams {
            variant,
            c_src,
            c_dst,
            attention,
            features,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.attention
            .iter()
            .chain(&self.features)
            .flat_map(Conv::param_ids)
            .collect()
    }

    /// Zeroes the feature kernels `W_f` (weights and biases), which silences
    /// the message whatever the attention map.
    pub fn zero_feature_kernels(&self, params: &mut ParamSet) {
        for f in &self.features {
            f.zero(params);
        }
    }

    fn check_input(&self, g: &Graph, f: Var) -> Result<()> {
        let c = g.shape(f)[1];
        if c != self.c_src {
            return Err(shape_err!(
                "distillation expects {} source channels, got {c}",
                self.c_src
            ));
        }
        Ok(())
    }
}

/// `A = sigmoid(W_m ⊗ F)`, one gate per destination channel and pixel.
pub fn attention_map(g: &mut Graph, b: &Bound, f: Var, p: &DistillationParams) -> Result<Var> {
    p.check_input(g, f)?;
    let att = p
        .attention
        .as_ref()
        .ok_or_else(|| config_err!("variant {} has no attention map", p.variant))?;
    let logits = att.forward(g, b, f)?;
    Ok(g.sigmoid(logits))
}

/// `F' = A ⊙ (W_f ⊗ F)`.
pub fn distill_message(g: &mut Graph, b: &Bound, f: Var, p: &DistillationParams) -> Result<Var> {
    p.check_input(g, f)?;
    if p.variant == Variant::None {
        let [n, _, h, w] = g.shape(f);
        return Ok(g.constant(Tensor::zeros([n, p.c_dst, h, w])));
    }
    let stacked = if p.features.len() == 1 {
        p.features[0].forward(g, b, f)?
    } else {
        let parts = p
            .features
            .iter()
            .map(|conv| conv.forward(g, b, f))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&parts)?
    };
    let a = attention_map(g, b, f, p)?;
    g.mul(a, stacked)
}

/// Element-wise sum of the primary feature and the passed message.
pub fn merge_message(g: &mut Graph, primary: Var, message: Var) -> Result<Var> {
    g.add(primary, message)
}

/// Exchanges messages in both directions. Both messages are computed from the
/// pre-merge features, so the result does not depend on evaluation order.
pub fn dual_distill(
    g: &mut Graph,
    b: &Bound,
    seg: Var,
    depth: Var,
    seg_to_depth: &DistillationParams,
    depth_to_seg: &DistillationParams,
) -> Result<(Var, Var)> {
    let ([sn, _, sh, sw], [dn, _, dh, dw]) = (g.shape(seg), g.shape(depth));
    if (sn, sh, sw) != (dn, dh, dw) {
        return Err(shape_err!(
            "dual_distill: seg {:?} and depth {:?} are not aligned",
            g.shape(seg),
            g.shape(depth)
        ));
    }
    let to_seg = match depth_to_seg.variant {
        Variant::None => None,
        _ => Some(distill_message(g, b, depth, depth_to_seg)?),
    };
    let to_depth = match seg_to_depth.variant {
        Variant::None => None,
        _ => Some(distill_message(g, b, seg, seg_to_depth)?),
    };
    let seg_out = match to_seg {
        Some(m) => merge_message(g, seg, m)?,
        None => seg,
    };
    let depth_out = match to_depth {
        Some(m) => merge_message(g, depth, m)?,
        None => depth,
    };
    Ok((seg_out, depth_out))
}
