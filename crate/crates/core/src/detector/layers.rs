//! Minimal layers with hand-written backward passes.
//!
//! Parameters live in flat `Vec<f64>` buffers and are viewed as matrices when
//! needed, which keeps the optimizer, checkpointing and finite-difference
//! checks independent of layer shapes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn normal<R: Rng + ?Sized>(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let mut p = Param::zeros(name, shape);
        let dist = Normal::new(0.0, std).expect("positive std");
        for v in &mut p.value {
            *v = dist.sample(rng);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    fn matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.value.len() / self.shape[0]), &self.value)
            .expect("param shape")
    }

    fn grad_matrix(&mut self) -> ArrayViewMut2<'_, f64> {
        let rows = self.shape[0];
        let cols = self.grad.len() / rows;
        ArrayViewMut2::from_shape((rows, cols), &mut self.grad).expect("param shape")
    }
}

/// Square-kernel 2-D convolution over a single `(C, H, W)` feature map.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Saved forward state needed by [`Conv2d::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weight_std: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = weight_std.unwrap_or((2.0 / fan_in).sqrt());
        Conv2d {
            weight: Param::normal(format!("{name}.weight"), vec![out_ch, in_ch * kernel * kernel], std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> (Array2<f64>, (usize, usize)) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let out_row = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    fn col2im(&self, cols: &Array2<f64>, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Array3<f64> {
        let k = self.kernel;
        let mut x = Array3::<f64>::zeros((c, h, w));
        let xs = x.as_slice_mut().expect("standard layout");
        let cs = cols.as_slice().expect("standard layout");
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src_row = &cs[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[base + ix as usize] += src_row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (cols, (oh, ow)) = self.im2col(x);
        let mut out = Array2::<f64>::zeros((self.out_ch, oh * ow));
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(&self.bias.value) {
            row.fill(b);
        }
        general_mat_mul(1.0, &self.weight.matrix(), &cols, 1.0, &mut out);
        let out = out.into_shape_with_order((self.out_ch, oh, ow)).expect("conv output shape");
        (
            out,
            ConvCache {
                cols,
                in_hw: (h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, cache: &ConvCache, grad_out: &Array3<f64>, need_input_grad: bool) -> Option<Array3<f64>> {
        let (oh, ow) = cache.out_hw;
        let g = grad_out
            .view()
            .into_shape_with_order((self.out_ch, oh * ow))
            .expect("grad shape");
        general_mat_mul(1.0, &g, &cache.cols.t(), 1.0, &mut self.weight.grad_matrix());
        for (gb, row) in self.bias.grad.iter_mut().zip(g.axis_iter(Axis(0))) {
            *gb += row.sum();
        }
        need_input_grad.then(|| {
            let gcols = self.weight.matrix().t().dot(&g);
            let (h, w) = cache.in_hw;
            self.col2im(&gcols, self.in_ch, h, w, oh, ow)
        })
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer over row-major batches `(N, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, weight_std: Option<f64>, rng: &mut R) -> Self {
        let std = weight_std.unwrap_or((2.0 / in_dim as f64).sqrt());
        Linear {
            weight: Param::normal(format!("{name}.weight"), vec![out_dim, in_dim], std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((x.nrows(), self.out_dim));
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.assign(&ndarray::aview1(&self.bias.value));
        }
        general_mat_mul(1.0, x, &self.weight.matrix().t(), 1.0, &mut out);
        out
    }

    /// `x` is the forward input. Returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, x: &Array2<f64>, grad_out: &Array2<f64>, need_input_grad: bool) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &grad_out.t(), x, 1.0, &mut self.weight.grad_matrix());
        for (gb, col) in self.bias.grad.iter_mut().zip(grad_out.axis_iter(Axis(1))) {
            *gb += col.sum();
        }
        need_input_grad.then(|| grad_out.dot(&self.weight.matrix()))
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward<D: ndarray::Dimension>(grad: &mut ndarray::Array<f64, D>, output: &ndarray::Array<f64, D>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}
