//! A small reverse-mode tape over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its nodes; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Convolutions run as im2col + GEMM. All arithmetic is `f64` and the
//! evaluation order is fixed, so results are bit-reproducible.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub const fn strided(kernel: usize, stride: usize) -> Self {
        ConvSpec {
            stride,
            pad: (kernel - 1) / 2,
            dilation: 1,
        }
    }

    fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        (len + 2 * self.pad)
            .checked_sub(span)
            .map(|v| v / self.stride + 1)
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    MinScalar(Var, f64),
    Concat(Vec<Var>),
    UpsampleNearest(Var, usize),
    UpsampleBilinear(Var, usize),
    Stencil3x3(Var, [f64; 9]),
    Sum(Var),
    Mean(Var),
    DynamicMask {
        kernels: Var,
        features: Var,
        cells: Vec<[usize; 3]>,
    },
    Focal {
        logits: Var,
        targets: Tensor,
        alpha: f64,
        gamma: f64,
    },
    Dice {
        probs: Var,
        targets: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const DICE_EPS: f64 = 1e-6;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.nodes[a.0].value.map_values(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Square root; the gradient at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("sqrt of a negative value".into()));
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    /// Element-wise `min(x, k)`.
    pub fn min_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::MinScalar(a, k), |x| x.min(k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [n, _, h, w] = self.shape(first);
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.shape(p);
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err!(
                    "concat: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                ));
            }
            total_c += pc;
        }
        let mut out = Tensor::zeros([n, total_c, h, w]);
        let hw = h * w;
        for b in 0..n {
            let mut c0 = 0;
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                let src = &t.data()[b * pc * hw..(b + 1) * pc * hw];
                let dst_start = (b * total_c + c0) * hw;
                out.data_mut()[dst_start..dst_start + pc * hw].copy_from_slice(src);
                c0 += pc;
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        {
            let od = out.data_mut();
            for plane in 0..n * c {
                let src = &x.data()[plane * h * w..(plane + 1) * h * w];
                let dst = &mut od[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..oh {
                    let row = &src[(y / factor) * w..(y / factor + 1) * w];
                    for xo in 0..ow {
                        dst[y * ow + xo] = row[xo / factor];
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::UpsampleNearest(a, factor), rg)
    }

    /// Bilinear upsampling with half-pixel centres (`align_corners = false`).
    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (h * factor, w * factor);
        let ty = bilinear_taps(h, factor);
        let tx = bilinear_taps(w, factor);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        {
            let od = out.data_mut();
            for plane in 0..n * c {
                let src = &x.data()[plane * h * w..(plane + 1) * h * w];
                let dst = &mut od[plane * oh * ow..(plane + 1) * oh * ow];
                for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                        let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                        dst[y * ow + xo] = top * (1.0 - ly) + bot * ly;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::UpsampleBilinear(a, factor), rg)
    }

    /// Per-channel 3×3 correlation with a fixed kernel and replicate padding.
    pub fn stencil3x3(&mut self, a: Var, kernel: [f64; 9]) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let mut out = Tensor::zeros([n, c, h, w]);
        {
            let od = out.data_mut();
            for plane in 0..n * c {
                let src = &x.data()[plane * h * w..(plane + 1) * h * w];
                let dst = &mut od[plane * h * w..(plane + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for (k, &kv) in kernel.iter().enumerate() {
                            if kv == 0.0 {
                                continue;
                            }
                            let sy = clamp_offset(y, k / 3, h);
                            let sx = clamp_offset(xx, k % 3, w);
                            acc += kv * src[sy * w + sx];
                        }
                        dst[y * w + xx] = acc;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Stencil3x3(a, kernel), rg)
    }

    /// 2-D cross-correlation with zero padding. `w` is `(out, in, kh, kw)`,
    /// `b` is `(1, out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, kh, kw] = self.shape(w);
        if wcin != cin {
            return Err(shape_err!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, cout, 1, 1] {
                return Err(shape_err!("conv2d: bias shape {:?}", self.shape(b)));
            }
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(shape_err!("conv2d: stride and dilation must be positive"));
        }
        let (oh, ow) = match (spec.out_len(h, kh), spec.out_len(wd, kw)) {
            (Some(a), Some(c)) => (a, c),
            _ => return Err(shape_err!("conv2d: input {h}x{wd} smaller than kernel")),
        };
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            spec,
        };
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let k = cin * kh * kw;
        let p = oh * ow;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { k * p }];
        for bi in 0..n {
            let xin = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let colref: &[f64] = if geo.is_pointwise() {
                xin
            } else {
                geo.im2col(xin, &mut cols);
                &cols
            };
            let dst = &mut out.data_mut()[bi * cout * p..(bi + 1) * cout * p];
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for (co, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bv[co]);
                }
            }
            gemm(cout, k, p, wv.data(), k, 1, colref, p, 1, 1.0, dst, p, 1);
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// SOLO-style dynamic 1×1 convolution. For each `[batch, row, col]` cell
    /// the kernel vector `kernels[batch, :, row, col]` is dotted with the
    /// feature map `features[batch]`, giving one `(1, 1, h, w)` logit plane
    /// per cell, stacked as `(cells, 1, h, w)`.
    pub fn dynamic_mask(&mut self, kernels: Var, features: Var, cells: &[[usize; 3]]) -> Result<Var> {
        let [kb, ke, sr, sc] = self.shape(kernels);
        let [fb, fe, h, w] = self.shape(features);
        if kb != fb || ke != fe {
            return Err(shape_err!(
                "dynamic_mask: kernels {:?} vs features {:?}",
                self.shape(kernels),
                self.shape(features)
            ));
        }
        if let Some(bad) = cells.iter().find(|[b, r, c]| *b >= kb || *r >= sr || *c >= sc) {
            return Err(shape_err!("dynamic_mask: cell {bad:?} out of range"));
        }
        let kv = self.value(kernels);
        let fv = self.value(features);
        let hw = h * w;
        let mut out = Tensor::zeros([cells.len(), 1, h, w]);
        for (i, &[b, r, c]) in cells.iter().enumerate() {
            let dst = &mut out.data_mut()[i * hw..(i + 1) * hw];
            for e in 0..ke {
                let coef = kv.at(b, e, r, c);
                let src = &fv.data()[(b * fe + e) * hw..(b * fe + e + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += coef * s;
                }
            }
        }
        let rg = self.rg(&[kernels, features]);
        Ok(self.push(
            out,
            Op::DynamicMask {
                kernels,
                features,
                cells: cells.to_vec(),
            },
            rg,
        ))
    }

    /// Sigmoid focal loss summed over every element of `logits` (not
    /// normalised). `targets` holds 0/1 labels of the same shape.
    pub fn focal_loss(&mut self, logits: Var, targets: Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(shape_err!(
                "focal: logits {:?} vs targets {:?}",
                self.shape(logits),
                targets.shape()
            ));
        }
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| focal_term(z, t, alpha, gamma).0)
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Mean over instances of `1 - dice`, with
    /// `dice = (2 Σ p t + ε) / (Σ p² + Σ t² + ε)` per `(N, 1, h, w)` plane.
    pub fn dice_loss(&mut self, probs: Var, targets: Tensor) -> Result<Var> {
        if self.shape(probs) != targets.shape() {
            return Err(shape_err!(
                "dice: probs {:?} vs targets {:?}",
                self.shape(probs),
                targets.shape()
            ));
        }
        let pv = self.value(probs);
        let [n, c, h, w] = pv.shape();
        let plane = c * h * w;
        let mut total = 0.0;
        for i in 0..n {
            let (a, b, cc) = dice_sums(
                &pv.data()[i * plane..(i + 1) * plane],
                &targets.data()[i * plane..(i + 1) * plane],
            );
            total += 1.0 - (2.0 * a + DICE_EPS) / (b + cc + DICE_EPS);
        }
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor::scalar(value), Op::Dice { probs, targets }, rg))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map_values(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || zip_with(g, vb, |gg, x| gg * x));
                self.acc(grads, *b, || zip_with(g, va, |gg, x| gg * x));
            }
            Op::Scale(a, k) => self.acc(grads, *a, || g.map_values(|v| v * k)),
            Op::AddScalar(a) => self.acc(grads, *a, || g.clone()),
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || {
                    zip_with(g, va, |gg, x| if x > 0.0 { gg } else { 0.0 })
                })
            }
            Op::Sigmoid(a) => self.acc(grads, *a, || zip_with(g, y, |gg, s| gg * s * (1.0 - s))),
            Op::Softplus(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || zip_with(g, va, |gg, x| gg * sigmoid(x)))
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || {
                    zip_with(g, va, |gg, x| {
                        if x > 0.0 {
                            gg
                        } else if x < 0.0 {
                            -gg
                        } else {
                            0.0
                        }
                    })
                })
            }
            Op::Square(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || zip_with(g, va, |gg, x| 2.0 * gg * x))
            }
            Op::Sqrt(a) => self.acc(grads, *a, || {
                zip_with(g, y, |gg, s| if s > 0.0 { gg * 0.5 / s } else { 0.0 })
            }),
            Op::MinScalar(a, k) => {
                let va = self.value(*a);
                self.acc(grads, *a, || zip_with(g, va, |gg, x| if x < *k { gg } else { 0.0 }))
            }
            Op::Sum(a) => {
                let s = g.item();
                self.acc(grads, *a, || Tensor::full(self.shape(*a), s))
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = shape.iter().product::<usize>().max(1) as f64;
                let s = g.item() / n;
                self.acc(grads, *a, || Tensor::full(shape, s))
            }
            Op::Concat(parts) => {
                let [n, total_c, h, w] = y.shape();
                let hw = h * w;
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.wants(p) {
                        let mut gp = Tensor::zeros([n, pc, h, w]);
                        for b in 0..n {
                            let src_start = (b * total_c + c0) * hw;
                            gp.data_mut()[b * pc * hw..(b + 1) * pc * hw]
                                .copy_from_slice(&g.data()[src_start..src_start + pc * hw]);
                        }
                        accumulate(grads, p, gp);
                    }
                    c0 += pc;
                }
            }
            Op::UpsampleNearest(a, factor) => self.acc(grads, *a, || {
                let [n, c, h, w] = self.shape(*a);
                let (oh, ow) = (h * factor, w * factor);
                let mut ga = Tensor::zeros([n, c, h, w]);
                for plane in 0..n * c {
                    let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut ga.data_mut()[plane * h * w..(plane + 1) * h * w];
                    for yy in 0..oh {
                        for xx in 0..ow {
                            dst[(yy / factor) * w + xx / factor] += src[yy * ow + xx];
                        }
                    }
                }
                ga
            }),
            Op::UpsampleBilinear(a, factor) => self.acc(grads, *a, || {
                let [n, c, h, w] = self.shape(*a);
                let (oh, ow) = (h * factor, w * factor);
                let ty = bilinear_taps(h, *factor);
                let tx = bilinear_taps(w, *factor);
                let mut ga = Tensor::zeros([n, c, h, w]);
                for plane in 0..n * c {
                    let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut ga.data_mut()[plane * h * w..(plane + 1) * h * w];
                    for (yy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let gv = src[yy * ow + xx];
                            dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                            dst[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                ga
            }),
            Op::Stencil3x3(a, kernel) => self.acc(grads, *a, || {
                let [n, c, h, w] = self.shape(*a);
                let mut ga = Tensor::zeros([n, c, h, w]);
                for plane in 0..n * c {
                    let src = &g.data()[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut ga.data_mut()[plane * h * w..(plane + 1) * h * w];
                    for yy in 0..h {
                        for xx in 0..w {
                            let gv = src[yy * w + xx];
                            for (k, &kv) in kernel.iter().enumerate() {
                                if kv == 0.0 {
                                    continue;
                                }
                                let sy = clamp_offset(yy, k / 3, h);
                                let sx = clamp_offset(xx, k % 3, w);
                                dst[sy * w + sx] += kv * gv;
                            }
                        }
                    }
                }
                ga
            }),
            Op::Conv2d { x, w, b, spec } => self.conv_backward(*x, *w, *b, *spec, g, grads),
            Op::DynamicMask {
                kernels,
                features,
                cells,
            } => {
                let kv = self.value(*kernels);
                let fv = self.value(*features);
                let [_, fe, h, w] = fv.shape();
                let hw = h * w;
                if self.wants(*kernels) {
                    let mut gk = Tensor::zeros(kv.shape());
                    for (i, &[b, r, c]) in cells.iter().enumerate() {
                        let gi = &g.data()[i * hw..(i + 1) * hw];
                        for e in 0..fe {
                            let src = &fv.data()[(b * fe + e) * hw..(b * fe + e + 1) * hw];
                            let dot: f64 = gi.iter().zip(src).map(|(a, s)| a * s).sum();
                            let idx = gk.index(b, e, r, c);
                            gk.data_mut()[idx] += dot;
                        }
                    }
                    accumulate(grads, *kernels, gk);
                }
                if self.wants(*features) {
                    let mut gf = Tensor::zeros(fv.shape());
                    for (i, &[b, r, c]) in cells.iter().enumerate() {
                        let gi = &g.data()[i * hw..(i + 1) * hw];
                        for e in 0..fe {
                            let coef = kv.at(b, e, r, c);
                            let dst = &mut gf.data_mut()[(b * fe + e) * hw..(b * fe + e + 1) * hw];
                            for (d, a) in dst.iter_mut().zip(gi) {
                                *d += coef * a;
                            }
                        }
                    }
                    accumulate(grads, *features, gf);
                }
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let s = g.item();
                let zv = self.value(*logits);
                self.acc(grads, *logits, || {
                    zip_with(zv, targets, |z, t| s * focal_term(z, t, *alpha, *gamma).1)
                })
            }
            Op::Dice { probs, targets } => {
                let s = g.item();
                let pv = self.value(*probs);
                self.acc(grads, *probs, || {
                    let [n, c, h, w] = pv.shape();
                    let plane = c * h * w;
                    let mut gp = Tensor::zeros(pv.shape());
                    for i in 0..n {
                        let p = &pv.data()[i * plane..(i + 1) * plane];
                        let t = &targets.data()[i * plane..(i + 1) * plane];
                        let (a, b, cc) = dice_sums(p, t);
                        let den = b + cc + DICE_EPS;
                        let num = 2.0 * a + DICE_EPS;
                        let dst = &mut gp.data_mut()[i * plane..(i + 1) * plane];
                        for j in 0..plane {
                            let dd = (2.0 * t[j] * den - num * 2.0 * p[j]) / (den * den);
                            dst[j] = -s * dd / n as f64;
                        }
                    }
                    gp
                })
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.wants(v) {
            accumulate(grads, v, f());
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [cout, _, kh, kw] = wv.shape();
        let [_, _, oh, ow] = g.shape();
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            spec,
        };
        let k = cin * kh * kw;
        let p = oh * ow;
        if let Some(b) = b {
            if self.wants(b) {
                let mut gb = Tensor::zeros([1, cout, 1, 1]);
                for bi in 0..n {
                    for co in 0..cout {
                        let start = (bi * cout + co) * p;
                        gb.data_mut()[co] += g.data()[start..start + p].iter().sum::<f64>();
                    }
                }
                accumulate(grads, b, gb);
            }
        }
        let want_w = self.wants(w);
        let want_x = self.wants(x);
        if !want_w && !want_x {
            return;
        }
        let mut gw = Tensor::zeros(wv.shape());
        let mut gx = Tensor::zeros(xv.shape());
        let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { k * p }];
        let mut dcols = vec![0.0; k * p];
        for bi in 0..n {
            let gy = &g.data()[bi * cout * p..(bi + 1) * cout * p];
            let xin = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if want_w {
                let colref: &[f64] = if geo.is_pointwise() {
                    xin
                } else {
                    geo.im2col(xin, &mut cols);
                    &cols
                };
                // dW += dY · colsᵀ
                gemm(cout, p, k, gy, p, 1, colref, 1, p, 1.0, gw.data_mut(), k, 1);
            }
            if want_x {
                // dcols = Wᵀ · dY
                gemm(k, cout, p, wv.data(), 1, k, gy, p, 1, 0.0, &mut dcols, p, 1);
                let gxi = &mut gx.data_mut()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if geo.is_pointwise() {
                    gxi.copy_from_slice(&dcols);
                } else {
                    geo.col2im(&dcols, gxi);
                }
            }
        }
        if want_w {
            accumulate(grads, w, gw);
        }
        if want_x {
            accumulate(grads, x, gx);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

#[inline]
fn clamp_offset(base: usize, tap: usize, len: usize) -> usize {
    (base + tap).saturating_sub(1).min(len - 1)
}

/// `(i0, i1, λ)` per output index for half-pixel bilinear resampling.
fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal loss value and its derivative with respect to the logit.
fn focal_term(z: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = 1.0 - p;
    if t > 0.5 {
        let log_p = -softplus(-z);
        let loss = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        (loss, grad)
    } else {
        let log_q = -softplus(z);
        let loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * log_q);
        (loss, grad)
    }
}

fn dice_sums(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    p.iter().zip(t).fold((0.0, 0.0, 0.0), |(a, b, c), (&pi, &ti)| {
        (a + pi * ti, b + pi * pi, c + ti * ti)
    })
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    /// Source coordinate for output index `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let v = (o * self.spec.stride + t * self.spec.dilation) as isize - self.spec.pad as isize;
        (v >= 0 && (v as usize) < len).then_some(v as usize)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.oh * self.ow;
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let d = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, i, self.h) {
                            None => d.fill(0.0),
                            Some(sy) => {
                                let srow = &x[(c * self.h + sy) * self.w..(c * self.h + sy + 1) * self.w];
                                for (ox, v) in d.iter_mut().enumerate() {
                                    *v = self.src(ox, j, self.w).map_or(0.0, |sx| srow[sx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let p = self.oh * self.ow;
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let Some(sy) = self.src(oy, i, self.h) else { continue };
                        let drow = &mut x[(c * self.h + sy) * self.w..(c * self.h + sy + 1) * self.w];
                        for ox in 0..self.ow {
                            if let Some(sx) = self.src(ox, j, self.w) {
                                drow[sx] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + a · b` with `a` of shape `m × k` and `b` of shape `k × n`,
/// each addressed through explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every addressed element inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, kh, kw] = w.shape();
        let oh = (h + 2 * spec.pad - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
        let ow = (wd + 2 * spec.pad - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let sy = (oy * spec.stride + i * spec.dilation) as isize - spec.pad as isize;
                                    let sx = (ox * spec.stride + j * spec.dilation) as isize - spec.pad as isize;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at(co, ci, i, j) * x.at(b, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        let idx = out.index(b, co, oy, ox);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: Shape4, scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for spec in [
            ConvSpec::same(3, 1),
            ConvSpec::same(3, 3),
            ConvSpec::strided(3, 2),
            ConvSpec { stride: 1, pad: 0, dilation: 1 },
        ] {
            let x = ramp([2, 3, 9, 7], 0.1);
            let w = ramp([4, 3, 3, 3], 0.05);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, spec).unwrap();
            let want = naive_conv(&x, &w, spec);
            assert_eq!(g.shape(y), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_padding_preserves_size_for_every_rate() {
        for rate in [1, 3, 6, 12] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros([1, 2, 8, 10]));
            let w = g.constant(Tensor::zeros([3, 2, 3, 3]));
            let y = g.conv2d(x, w, None, ConvSpec::same(3, rate)).unwrap();
            assert_eq!(g.shape(y), [1, 3, 8, 10]);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w, None, ConvSpec::same(3, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bilinear_preserves_constants() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 3, 5], 2.5));
        let y = g.upsample_bilinear(x, 4);
        assert_eq!(g.shape(y), [1, 1, 12, 20]);
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn sum_of_square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.square(x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn focal_single_positive_half_probability() {
        let mut g = Graph::new();
        let z = g.variable(Tensor::scalar(0.0));
        let f = g.focal_loss(z, Tensor::scalar(1.0), 0.25, 2.0).unwrap();
        let want = -0.25 * 0.25 * 0.5f64.ln();
        assert!((g.value(f).item() - want).abs() < 1e-15);
        assert!((want - 0.04332).abs() < 1e-5);
    }
}
