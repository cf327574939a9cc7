use ndarray::{Array2, Zip};

use super::Real;

#[derive(Default)]
pub struct Relu<S: Real> {
    out: Option<Array2<S>>,
}

impl<S: Real> Relu<S> {
    pub fn apply(mut x: Array2<S>) -> Array2<S> {
        x.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
        x
    }

    pub fn forward(&mut self, x: Array2<S>) -> Array2<S> {
        let y = Self::apply(x);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, mut g: Array2<S>) -> Array2<S> {
        let y = self.out.take().expect("backward without forward");
        Zip::from(&mut g).and(&y).for_each(|g, &y| {
            if y <= S::zero() {
                *g = S::zero();
            }
        });
        g
    }
}

#[derive(Default)]
pub struct Sigmoid<S: Real> {
    out: Option<Array2<S>>,
}

impl<S: Real> Sigmoid<S> {
    pub fn apply(mut x: Array2<S>) -> Array2<S> {
        x.mapv_inplace(|v| S::one() / (S::one() + (-v).exp()));
        x
    }

    pub fn forward(&mut self, x: Array2<S>) -> Array2<S> {
        let y = Self::apply(x);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, mut g: Array2<S>) -> Array2<S> {
        let y = self.out.take().expect("backward without forward");
        Zip::from(&mut g).and(&y).for_each(|g, &y| *g *= y * (S::one() - y));
        g
    }
}
