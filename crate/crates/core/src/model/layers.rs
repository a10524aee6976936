//! Strided convolution and transposed convolution with explicit backward passes.
//!
//! Activations use a channel-major layout `(C, B, H, W)` so that every layer is
//! a single gemm over a `(C·k·k, B·H·W)` column matrix. A `(B, 1, H, W)` image
//! batch has the same memory order as `(1, B, H, W)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn conv_out(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn transpose_out(&self, size: usize) -> usize {
        (size - 1) * self.stride + self.kernel - 2 * self.padding
    }
}

/// Unfolds `x: (C, B, H, W)` into `(C·k·k, B·oh·ow)` patch columns.
pub(crate) fn im2col<T: Real>(x: &Array4<T>, g: Geometry, oh: usize, ow: usize) -> Array2<T> {
    let (c, b, h, w) = x.dim();
    let k = g.kernel;
    let n = b * oh * ow;
    let mut cols = Array2::<T>::zeros((c * k * k, n));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let rbase = row * n;
                for bi in 0..b {
                    let plane = (ci * b + bi) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = plane + iy as usize * w;
                        let obase = rbase + (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[obase + ox] = xs[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `(C, B, H, W)` array.
pub(crate) fn col2im<T: Real>(
    cols: &Array2<T>,
    dims: (usize, usize, usize, usize),
    g: Geometry,
    oh: usize,
    ow: usize,
) -> Array4<T> {
    let (c, b, h, w) = dims;
    let k = g.kernel;
    let n = b * oh * ow;
    debug_assert_eq!(cols.dim(), (c * k * k, n));
    let mut x = Array4::<T>::zeros(dims);
    let cs = cols.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let rbase = ((ci * k + ki) * k + kj) * n;
                for bi in 0..b {
                    let plane = (ci * b + bi) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = plane + iy as usize * w;
                        let obase = rbase + (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[xrow + ix as usize] = xs[xrow + ix as usize] + cs[obase + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn as_matrix<T: Real>(x: Array4<T>) -> Array2<T> {
    let (c, b, h, w) = x.dim();
    x.into_shape_with_order((c, b * h * w)).expect("contiguous")
}

fn from_matrix<T: Real>(m: Array2<T>, dims: (usize, usize, usize, usize)) -> Array4<T> {
    m.into_shape_with_order(dims).expect("contiguous")
}

fn add_bias_rows<T: Real>(m: &mut Array2<T>, bias: &Array1<T>) {
    for (mut row, &b) in m.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
}

fn channel_sums<T: Real>(g: &Array2<T>) -> Array1<T> {
    g.sum_axis(Axis(1))
}

fn fan_in_uniform<T: Real, R: Rng + ?Sized>(
    shape: (usize, usize),
    fan_in: usize,
    slope: f64,
    rng: &mut R,
) -> Array2<T> {
    // He-uniform bound with the LeakyReLU gain.
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("positive bound");
    Array2::from_shape_simple_fn(shape, || T::from_f64_lossy(dist.sample(rng)))
}

fn bias_uniform<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Array1<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("positive bound");
    Array1::from_shape_simple_fn(len, || T::from_f64_lossy(dist.sample(rng)))
}

/// Gradients of one layer's parameters.
#[derive(Debug, Clone)]
pub(crate) struct ParamGrads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d<T> {
    /// `(out, in·k·k)`, i.e. `[out, in, k, k]` in row-major order.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: Geometry,
}

impl<T: Real> Conv2d<T> {
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geometry: Geometry,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * geometry.kernel * geometry.kernel;
        Self {
            weight: fan_in_uniform((out_channels, fan_in), fan_in, slope, rng),
            bias: bias_uniform(out_channels, fan_in, rng),
            in_channels,
            out_channels,
            geometry,
        }
    }

    /// Returns the output and the patch columns needed by [`Self::backward`].
    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, Array2<T>) {
        let (c, b, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let (oh, ow) = (self.geometry.conv_out(h), self.geometry.conv_out(w));
        let cols = im2col(x, self.geometry, oh, ow);
        let mut out = self.weight.dot(&cols);
        add_bias_rows(&mut out, &self.bias);
        (from_matrix(out, (self.out_channels, b, oh, ow)), cols)
    }

    pub fn backward(
        &self,
        cols: &Array2<T>,
        input_dims: (usize, usize, usize, usize),
        grad_out: Array4<T>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<ParamGrads<T>>, Option<Array4<T>>) {
        let (_, _, oh, ow) = grad_out.dim();
        let g = as_matrix(grad_out);
        let params = want_params.then(|| {
            let mut dw = Array2::<T>::zeros(self.weight.dim());
            general_mat_mul(T::one(), &g, &cols.t(), T::zero(), &mut dw);
            ParamGrads {
                weight: dw,
                bias: channel_sums(&g),
            }
        });
        let input = want_input.then(|| {
            let dcols = self.weight.t().dot(&g);
            col2im(&dcols, input_dims, self.geometry, oh, ow)
        });
        (params, input)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvTranspose2d<T> {
    /// `(in, out·k·k)`, i.e. `[in, out, k, k]` in row-major order.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: Geometry,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geometry: Geometry,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        // Each output pixel receives about in·k²/s² contributions.
        let k2 = geometry.kernel * geometry.kernel;
        let fan_in = (in_channels * k2 / (geometry.stride * geometry.stride)).max(1);
        Self {
            weight: fan_in_uniform((in_channels, out_channels * k2), fan_in, slope, rng),
            bias: bias_uniform(out_channels, fan_in, rng),
            in_channels,
            out_channels,
            geometry,
        }
    }

    /// Returns the output and the flattened input needed by [`Self::backward`].
    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, Array2<T>) {
        let (c, b, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let (oh, ow) = (self.geometry.transpose_out(h), self.geometry.transpose_out(w));
        let flat = as_matrix(x.clone());
        let cols = self.weight.t().dot(&flat);
        let out = col2im(&cols, (self.out_channels, b, oh, ow), self.geometry, h, w);
        let mut out = as_matrix(out);
        add_bias_rows(&mut out, &self.bias);
        (from_matrix(out, (self.out_channels, b, oh, ow)), flat)
    }

    pub fn backward(
        &self,
        flat_input: &Array2<T>,
        input_dims: (usize, usize, usize, usize),
        grad_out: Array4<T>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<ParamGrads<T>>, Option<Array4<T>>) {
        let (_, _, h, w) = input_dims;
        let dcols = im2col(&grad_out, self.geometry, h, w);
        let params = want_params.then(|| {
            let mut dw = Array2::<T>::zeros(self.weight.dim());
            general_mat_mul(T::one(), flat_input, &dcols.t(), T::zero(), &mut dw);
            ParamGrads {
                weight: dw,
                bias: channel_sums(&as_matrix(grad_out)),
            }
        });
        let input = want_input.then(|| from_matrix(self.weight.dot(&dcols), input_dims));
        (params, input)
    }
}

pub(crate) fn leaky_relu_inplace<T: Real>(x: &mut Array4<T>, slope: T) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { v * slope });
}

/// Backward of LeakyReLU given its (post-activation) output.
pub(crate) fn leaky_relu_backward<T: Real>(grad: &mut Array4<T>, output: &Array4<T>, slope: T) {
    grad.zip_mut_with(output, |g, &o| {
        if o <= T::zero() {
            *g = *g * slope;
        }
    });
}
