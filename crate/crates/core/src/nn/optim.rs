use ndarray::Zip;

use super::{lit, Param, Real};

/// Adam with bias correction. One instance per parameter group; the step
/// counter is shared by every tensor passed to [`Adam::step`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and clears the gradients.
    pub fn step<S: Real>(&mut self, params: Vec<&mut Param<S>>) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps): (S, S, S) = (lit(self.beta1), lit(self.beta2), lit(self.eps));
        let step: S = lit(self.lr / c1);
        let c2s: S = lit(c2.sqrt());
        for p in params {
            Zip::from(&mut p.value)
                .and(&mut p.grad)
                .and(&mut p.m)
                .and(&mut p.v)
                .for_each(|w, g, m, v| {
                    *m = b1 * *m + (S::one() - b1) * *g;
                    *v = b2 * *v + (S::one() - b2) * *g * *g;
                    *w -= step * *m / ((*v).sqrt() / c2s + eps);
                    *g = S::zero();
                });
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<S: Real>(params: &mut [&mut Param<S>], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .map(|p| p.grad.iter().map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s: S = lit(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Param::new(array![[3.0f64, -2.0]]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.grad = p.value.mapv(|w| 2.0 * w);
            opt.step(vec![&mut p]);
        }
        assert!(p.value.iter().all(|w| w.abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = Param::new(array![[0.0f64, 0.0]]);
        p.grad = array![[3.0, 4.0]];
        let before = clip_grad_norm(&mut [&mut p], 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((p.grad[[0, 0]] - 0.6).abs() < 1e-12);
    }
}
