//! A small feed-forward network engine with hand-written backward passes.
//!
//! Activations are row-major matrices with one sample per row. Image
//! activations are flattened NHWC (`row = y * w * c + x * c + channel`), which
//! lets convolutions lower to a single im2col GEMM without transposes.
//!
//! Everything is generic over [`Real`] so training runs in `f32` while the
//! gradient checks run the very same code in `f64`.

mod activation;
mod conv;
mod linear;
pub mod loss;
mod optim;

use std::fmt::Debug;

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use activation::{Relu, Sigmoid};
pub use conv::{Conv2d, ConvGeom, ConvTranspose2d};
pub use linear::Linear;
pub use optim::{clip_grad_norm, Adam};

use crate::error::{validation, Result};

pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working precision.
#[inline]
pub fn lit<S: Real>(x: f64) -> S {
    S::from_f64(x).expect("literal representable in working precision")
}

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<S: Real> {
    pub value: Array2<S>,
    pub grad: Array2<S>,
    pub(crate) m: Array2<S>,
    pub(crate) v: Array2<S>,
}

impl<S: Real> Param<S> {
    pub fn new(value: Array2<S>) -> Self {
        let dim = value.raw_dim();
        Self {
            value,
            grad: Array2::zeros(dim.clone()),
            m: Array2::zeros(dim.clone()),
            v: Array2::zeros(dim),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub(crate) fn normal_init<S: Real, R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize),
    std: f64,
) -> Array2<S> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        lit(z * std)
    })
}

/// Analytic cost of a layer or network: multiply-add FLOPs (2 per MAC) for one
/// sample, and trainable parameter count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub params: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost { flops: self.flops + rhs.flops, params: self.params + rhs.params }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

/// Serializable architecture description of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { input: usize, output: usize },
    Conv { geom: ConvGeom, out_c: usize },
    /// Transposed convolution; `geom` is the geometry of the forward
    /// convolution it is the adjoint of, so `geom.in_*` describe this
    /// layer's output grid.
    ConvTranspose { geom: ConvGeom, in_c: usize },
    Relu,
    Sigmoid,
}

impl LayerSpec {
    pub fn conv(h: usize, w: usize, c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv { geom: ConvGeom::new(h, w, c, k, stride, pad), out_c }
    }

    /// Transposed convolution from an `h × w × in_c` grid; the output size is
    /// `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose(
        h: usize,
        w: usize,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (w - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(oh, ow, out_c, k, stride, pad);
        debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
        LayerSpec::ConvTranspose { geom, in_c }
    }

    /// Output width for a given input width, or `None` when they disagree.
    pub fn out_dim(&self, input: usize) -> Option<usize> {
        match self {
            LayerSpec::Linear { input: i, output } => (*i == input).then_some(*output),
            LayerSpec::Conv { geom, out_c } => {
                (geom.in_len() == input).then_some(geom.out_h * geom.out_w * out_c)
            }
            LayerSpec::ConvTranspose { geom, in_c } => {
                (geom.out_h * geom.out_w * in_c == input).then_some(geom.in_len())
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Some(input),
        }
    }
}

pub enum Layer<S: Real> {
    Linear(Linear<S>),
    Conv(Conv2d<S>),
    ConvT(ConvTranspose2d<S>),
    Relu(Relu<S>),
    Sigmoid(Sigmoid<S>),
}

impl<S: Real> Layer<S> {
    pub fn build<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Self {
        match spec {
            LayerSpec::Linear { input, output } => Layer::Linear(Linear::new(*input, *output, rng)),
            LayerSpec::Conv { geom, out_c } => Layer::Conv(Conv2d::new(*geom, *out_c, rng)),
            LayerSpec::ConvTranspose { geom, in_c } => {
                Layer::ConvT(ConvTranspose2d::new(*geom, *in_c, rng))
            }
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::Sigmoid => Layer::Sigmoid(Sigmoid::default()),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear(l) => LayerSpec::Linear { input: l.input(), output: l.output() },
            Layer::Conv(c) => LayerSpec::Conv { geom: c.geom, out_c: c.out_c },
            Layer::ConvT(c) => LayerSpec::ConvTranspose { geom: c.geom, in_c: c.in_c },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Sigmoid(_) => LayerSpec::Sigmoid,
        }
    }

    pub fn forward(&mut self, x: Array2<S>) -> Array2<S> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv(c) => c.forward(x),
            Layer::ConvT(c) => c.forward(x),
            Layer::Relu(r) => r.forward(x),
            Layer::Sigmoid(s) => s.forward(x),
        }
    }

    pub fn infer(&self, x: Array2<S>) -> Array2<S> {
        match self {
            Layer::Linear(l) => l.infer(&x),
            Layer::Conv(c) => c.infer(&x),
            Layer::ConvT(c) => c.infer(&x),
            Layer::Relu(_) => Relu::apply(x),
            Layer::Sigmoid(_) => Sigmoid::apply(x),
        }
    }

    pub fn backward(&mut self, g: Array2<S>) -> Array2<S> {
        match self {
            Layer::Linear(l) => l.backward(&g),
            Layer::Conv(c) => c.backward(&g),
            Layer::ConvT(c) => c.backward(&g),
            Layer::Relu(r) => r.backward(g),
            Layer::Sigmoid(s) => s.backward(g),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvT(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Relu(_) | Layer::Sigmoid(_) => vec![],
        }
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::ConvT(c) => vec![&c.weight, &c.bias],
            Layer::Relu(_) | Layer::Sigmoid(_) => vec![],
        }
    }

    pub fn cost(&self) -> Cost {
        match self {
            Layer::Linear(l) => l.cost(),
            Layer::Conv(c) => c.cost(),
            Layer::ConvT(c) => c.cost(),
            Layer::Relu(_) | Layer::Sigmoid(_) => Cost::default(),
        }
    }
}

/// A chain of layers.
pub struct Sequential<S: Real> {
    layers: Vec<Layer<S>>,
    input: usize,
    output: usize,
}

impl<S: Real> Sequential<S> {
    pub fn new<R: Rng + ?Sized>(input: usize, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut dim = input;
        for (i, s) in specs.iter().enumerate() {
            dim = match s.out_dim(dim) {
                Some(d) => d,
                None => return validation(format!("layer {i} ({s:?}) does not accept width {dim}")),
            };
        }
        let layers = specs.iter().map(|s| Layer::build(s, rng)).collect();
        Ok(Self { layers, input, output: dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Training forward pass; caches what the backward pass needs.
    pub fn forward(&mut self, x: Array2<S>) -> Array2<S> {
        self.layers.iter_mut().fold(x, |h, l| l.forward(h))
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: Array2<S>) -> Array2<S> {
        self.layers.iter().fold(x, |h, l| l.infer(h))
    }

    /// Backpropagates `g` (gradient w.r.t. the last forward output),
    /// accumulating parameter gradients and returning the input gradient.
    pub fn backward(&mut self, g: Array2<S>) -> Array2<S> {
        self.layers.iter_mut().rev().fold(g, |g, l| l.backward(g))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn cost(&self) -> Cost {
        self.layers.iter().map(Layer::cost).sum()
    }

    pub fn tensors(&self) -> Vec<Array2<S>> {
        self.params().into_iter().map(|p| p.value.clone()).collect()
    }

    pub fn load_tensors(&mut self, tensors: &[Array2<S>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != tensors.len() {
            return validation(format!(
                "expected {} tensors, got {}",
                params.len(),
                tensors.len()
            ));
        }
        for (p, t) in params.iter_mut().zip(tensors) {
            if p.value.dim() != t.dim() {
                return validation(format!("tensor shape {:?} != {:?}", t.dim(), p.value.dim()));
            }
            p.value.assign(t);
        }
        Ok(())
    }
}
