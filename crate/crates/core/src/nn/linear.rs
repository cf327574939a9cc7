use ndarray::{Array2, Axis};
use rand::Rng;

use super::{normal_init, Cost, Param, Real};

/// Fully connected layer `y = x W + b` with `W: input × output`.
pub struct Linear<S: Real> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    x: Option<Array2<S>>,
}

impl<S: Real> Linear<S> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / input as f64).sqrt();
        Self {
            weight: Param::new(normal_init(rng, (input, output), std)),
            bias: Param::new(Array2::zeros((1, output))),
            x: None,
        }
    }

    pub fn input(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn infer(&self, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value;
        y
    }

    pub fn forward(&mut self, x: Array2<S>) -> Array2<S> {
        let y = self.infer(&x);
        self.x = Some(x);
        y
    }

    pub fn backward(&mut self, g: &Array2<S>) -> Array2<S> {
        let x = self.x.take().expect("backward without forward");
        self.weight.grad += &x.t().dot(g);
        self.bias.grad += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
        g.dot(&self.weight.value.t())
    }

    /// `params = m·n + n`, `flops = 2·m·n` for an `m → n` layer.
    pub fn cost(&self) -> Cost {
        let (m, n) = (self.input() as u64, self.output() as u64);
        Cost { flops: 2 * m * n, params: m * n + n }
    }
}
