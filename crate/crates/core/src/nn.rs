//! Named parameter storage and the convolution layer built on it.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{ConvSpec, Graph, Gradients, Var};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(config_err!("duplicate parameter name {name}"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a gradient-carrying leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.variable(t.clone())).collect(),
        }
    }

    /// Like [`bind`](Self::bind) but as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Graph handles for a [`ParamSet`], valid for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles in [`ParamSet`] order (for example the tail of a
    /// gradient-check input list).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, zero-filled where none flowed.
    pub fn collect(&self, params: &ParamSet, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.tensors.iter())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform with variance `2 / fan_in` (ReLU-preserving).
    He,
    /// Uniform with variance `1 / fan_in`.
    FanIn,
    Zero,
}

fn init_tensor(shape: [usize; 4], init: Init, rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let bound = match init {
        Init::He => (6.0 / fan_in).sqrt(),
        Init::FanIn => (3.0 / fan_in).sqrt(),
        Init::Zero => return Tensor::zeros(shape),
    };
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("sized")
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = params.add(
            format!("{name}.weight"),
            init_tensor([cout, cin, kernel, kernel], init, rng),
        )?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?;
        Ok(Conv { weight, bias, spec })
    }

    pub fn same(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(params, name, cin, cout, kernel, ConvSpec::same(kernel, 1), init, rng)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.weight), Some(b.var(self.bias)), self.spec)
    }

    pub fn out_channels(&self, params: &ParamSet) -> usize {
        params.get(self.weight).shape()[0]
    }

    pub fn in_channels(&self, params: &ParamSet) -> usize {
        params.get(self.weight).shape()[1]
    }

    pub fn set_bias(&self, params: &mut ParamSet, value: f64) {
        params.get_mut(self.bias).data_mut().fill(value);
    }

    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.weight).data_mut().fill(0.0);
        params.get_mut(self.bias).data_mut().fill(0.0);
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}
