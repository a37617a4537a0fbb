//! Dense rank-4 `f64` arrays in (batch, channel, row, col) layout.
//!
//! Everything that flows through the network is a [`Tensor`]: images,
//! feature blocks, convolution weights `(out, in, kh, kw)`, biases
//! `(1, C, 1, 1)` and scalars `(1, 1, 1, 1)`.

use ndarray::{Array2, Array3};

use crate::error::{shape_err, Result};

pub type Shape4 = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Wraps a single 2-D map as a `(1, 1, rows, cols)` tensor.
    pub fn from_map(map: &Array2<f64>) -> Self {
        let (r, c) = map.dim();
        Tensor {
            shape: [1, 1, r, c],
            data: map.iter().copied().collect(),
        }
    }

    /// Stacks equally sized 2-D maps along the batch axis.
    pub fn stack_maps<'a>(maps: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for m in maps {
            match dims {
                None => dims = Some(m.dim()),
                Some(d) if d != m.dim() => {
                    return Err(shape_err!("cannot stack maps {:?} and {:?}", d, m.dim()))
                }
                _ => {}
            }
            data.extend(m.iter().copied());
            n += 1;
        }
        let (r, c) = dims.unwrap_or((0, 0));
        Tensor::from_vec([n, 1, r, c], data)
    }

    /// Stacks `(H, W, 3)` images into an `(N, 3, H, W)` batch.
    pub fn from_images(images: &[&Array3<f64>]) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(shape_err!("empty image batch"));
        };
        let (h, w, ch) = first.dim();
        let mut data = Vec::with_capacity(images.len() * ch * h * w);
        for im in images {
            if im.dim() != (h, w, ch) {
                return Err(shape_err!("cannot stack images {:?} and {:?}", (h, w, ch), im.dim()));
            }
            for k in 0..ch {
                data.extend(im.index_axis(ndarray::Axis(2), k).iter().copied());
            }
        }
        Tensor::from_vec([images.len(), ch, h, w], data)
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.shape;
        ((n * cc + c) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Plane `(n, c)` as a 2-D array.
    pub fn map(&self, n: usize, c: usize) -> Array2<f64> {
        let [_, _, h, w] = self.shape;
        let start = self.index(n, c, 0, 0);
        Array2::from_shape_vec((h, w), self.data[start..start + h * w].to_vec())
            .expect("plane size matches")
    }

    /// Copy of batch item `n` as a `(1, C, H, W)` tensor.
    pub fn item_slice(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        let len = c * h * w;
        Tensor {
            shape: [1, c, h, w],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
