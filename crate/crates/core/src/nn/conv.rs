use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{normal_init, Cost, Param, Real};

/// Geometry of a square-kernel 2-D convolution over an NHWC grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_h: usize, in_w: usize, in_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && k >= 1, "kernel and stride must be positive");
        assert!(in_h + 2 * pad >= k && in_w + 2 * pad >= k, "kernel larger than padded input");
        Self {
            in_h,
            in_w,
            in_c,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.in_c
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits every (patch row, patch column offset, input offset) triple
    /// that lies inside the input; padding positions are skipped.
    #[inline]
    fn for_each_tap(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let c = self.in_c;
        let patch = self.patch_len();
        for b in 0..n {
            let img = b * self.in_len();
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((b * self.out_h + oy) * self.out_w + ox) * patch;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = img + (iy as usize * self.in_w + ix as usize) * c;
                            f(row + (ky * k + kx) * c, src);
                        }
                    }
                }
            }
        }
    }

    /// Lowers `x` (`n × in_len`) to the patch matrix (`n·out_pixels × patch_len`).
    pub fn im2col<S: Real>(&self, x: &Array2<S>) -> Array2<S> {
        let n = x.nrows();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = Array2::zeros((n * self.out_pixels(), self.patch_len()));
        let cs = cols.as_slice_mut().expect("fresh array");
        let c = self.in_c;
        self.for_each_tap(n, |dst, src| cs[dst..dst + c].copy_from_slice(&xs[src..src + c]));
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-adds patches back onto the input grid.
    pub fn col2im<S: Real>(&self, cols: &Array2<S>, n: usize) -> Array2<S> {
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().expect("standard layout");
        let mut x = Array2::zeros((n, self.in_len()));
        let xs = x.as_slice_mut().expect("fresh array");
        let c = self.in_c;
        self.for_each_tap(n, |dst, src| {
            for (o, i) in xs[src..src + c].iter_mut().zip(&cs[dst..dst + c]) {
                *o += *i;
            }
        });
        x
    }
}

pub struct Conv2d<S: Real> {
    pub geom: ConvGeom,
    pub out_c: usize,
    /// `patch_len × out_c`
    pub weight: Param<S>,
    pub bias: Param<S>,
    cols: Option<Array2<S>>,
}

impl<S: Real> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(geom: ConvGeom, out_c: usize, rng: &mut R) -> Self {
        let std = (2.0 / geom.patch_len() as f64).sqrt();
        Self {
            geom,
            out_c,
            weight: Param::new(normal_init(rng, (geom.patch_len(), out_c), std)),
            bias: Param::new(Array2::zeros((1, out_c))),
            cols: None,
        }
    }

    fn apply(&self, cols: &Array2<S>, n: usize) -> Array2<S> {
        let mut y = cols.dot(&self.weight.value);
        y += &self.bias.value;
        y.into_shape_with_order((n, self.geom.out_pixels() * self.out_c))
            .expect("contiguous GEMM output")
    }

    pub fn forward(&mut self, x: Array2<S>) -> Array2<S> {
        let cols = self.geom.im2col(&x);
        let y = self.apply(&cols, x.nrows());
        self.cols = Some(cols);
        y
    }

    pub fn infer(&self, x: &Array2<S>) -> Array2<S> {
        self.apply(&self.geom.im2col(x), x.nrows())
    }

    pub fn backward(&mut self, g: &Array2<S>) -> Array2<S> {
        let cols = self.cols.take().expect("backward without forward");
        let n = g.nrows();
        let g = g
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * self.geom.out_pixels(), self.out_c))
            .expect("gradient shape");
        self.weight.grad += &cols.t().dot(&g);
        self.bias.grad += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dcols = g.dot(&self.weight.value.t());
        self.geom.col2im(&dcols, n)
    }

    pub fn cost(&self) -> Cost {
        let macs = (self.geom.out_pixels() * self.geom.patch_len() * self.out_c) as u64;
        Cost { flops: 2 * macs, params: (self.weight.len() + self.bias.len()) as u64 }
    }
}

/// Transposed convolution, implemented as the adjoint of [`Conv2d`] with
/// geometry `geom` (so `geom.in_*` is this layer's output grid and
/// `geom.out_*` its input grid).
pub struct ConvTranspose2d<S: Real> {
    pub geom: ConvGeom,
    pub in_c: usize,
    /// `in_c × patch_len`
    pub weight: Param<S>,
    pub bias: Param<S>,
    x: Option<Array2<S>>,
}

impl<S: Real> ConvTranspose2d<S> {
    pub fn new<R: Rng + ?Sized>(geom: ConvGeom, in_c: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * geom.k * geom.k) as f64 / (geom.stride * geom.stride) as f64;
        Self {
            geom,
            in_c,
            weight: Param::new(normal_init(rng, (in_c, geom.patch_len()), (2.0 / fan_in).sqrt())),
            bias: Param::new(Array2::zeros((1, geom.in_c))),
            x: None,
        }
    }

    fn pixel_rows(&self, x: &Array2<S>) -> Array2<S> {
        let n = x.nrows();
        x.as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * self.geom.out_pixels(), self.in_c))
            .expect("input shape")
    }

    fn apply(&self, x: &Array2<S>) -> Array2<S> {
        let n = x.nrows();
        let cols = self.pixel_rows(x).dot(&self.weight.value);
        let out_c = self.geom.in_c;
        let y = self.geom.col2im(&cols, n);
        let mut y = y
            .into_shape_with_order((n * self.geom.in_h * self.geom.in_w, out_c))
            .expect("contiguous");
        y += &self.bias.value;
        y.into_shape_with_order((n, self.geom.in_len())).expect("contiguous")
    }

    pub fn forward(&mut self, x: Array2<S>) -> Array2<S> {
        let y = self.apply(&x);
        self.x = Some(x);
        y
    }

    pub fn infer(&self, x: &Array2<S>) -> Array2<S> {
        self.apply(x)
    }

    pub fn backward(&mut self, g: &Array2<S>) -> Array2<S> {
        let x = self.x.take().expect("backward without forward");
        let n = g.nrows();
        let out_c = self.geom.in_c;
        let gp = g
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * self.geom.in_h * self.geom.in_w, out_c))
            .expect("gradient shape");
        self.bias.grad += &gp.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dcols = self.geom.im2col(g);
        let xr = self.pixel_rows(&x);
        self.weight.grad += &xr.t().dot(&dcols);
        let dx = dcols.dot(&self.weight.value.t());
        dx.into_shape_with_order((n, self.geom.out_pixels() * self.in_c)).expect("contiguous")
    }

    pub fn cost(&self) -> Cost {
        let macs = (self.geom.out_pixels() * self.in_c * self.geom.patch_len()) as u64;
        Cost { flops: 2 * macs, params: (self.weight.len() + self.bias.len()) as u64 }
    }
}
