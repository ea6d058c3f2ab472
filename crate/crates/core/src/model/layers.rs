//! Layer kernels with hand-written backward passes.
//!
//! Batches are row-major `(batch, features)` matrices; image features are laid
//! out channel-major as `[c][y][x]`.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Max,
    Average,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv2d {
        weight: usize,
        bias: usize,
        input: ImageShape,
        out_channels: usize,
        kernel: usize,
    },
    Act(Activation),
    Pool {
        kind: Pooling,
        input: ImageShape,
    },
    Dense {
        weight: usize,
        bias: usize,
        in_dim: usize,
        out_dim: usize,
    },
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Input(Array2<f64>),
    Argmax(Vec<u32>),
    Nothing,
}

impl Layer {
    pub(crate) fn out_len(&self, in_len: usize) -> usize {
        match self {
            Layer::Conv2d { input, out_channels, .. } => out_channels * input.plane(),
            Layer::Act(_) => in_len,
            Layer::Pool { input, .. } => input.channels * (input.height / 2) * (input.width / 2),
            Layer::Dense { out_dim, .. } => *out_dim,
        }
    }

    pub(crate) fn forward(&self, params: &[Param], x: Array2<f64>, keep: bool) -> (Array2<f64>, Cache) {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                input,
                out_channels,
                kernel,
            } => {
                let w = params[*weight].matrix();
                let b = &params[*bias].value;
                let out = conv_forward(x.view(), w, b, *input, *out_channels, *kernel);
                (out, if keep { Cache::Input(x) } else { Cache::Nothing })
            }
            Layer::Act(Activation::Identity) => (x, Cache::Nothing),
            Layer::Act(Activation::Relu) => {
                let out = x.mapv(|v| v.max(0.0));
                (out, if keep { Cache::Input(x) } else { Cache::Nothing })
            }
            Layer::Pool { kind: Pooling::Max, input } => {
                let (out, argmax) = max_pool_forward(x.view(), *input);
                (out, if keep { Cache::Argmax(argmax) } else { Cache::Nothing })
            }
            Layer::Pool { kind: Pooling::Average, input } => (avg_pool_forward(x.view(), *input), Cache::Nothing),
            Layer::Dense { weight, bias, .. } => {
                let w = params[*weight].matrix();
                let b = ndarray::ArrayView1::from(&params[*bias].value[..]);
                let out = x.dot(&w.t()) + &b;
                (out, if keep { Cache::Input(x) } else { Cache::Nothing })
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the layer input when `need_input` is set.
    pub(crate) fn backward(
        &self,
        params: &[Param],
        cache: &Cache,
        grad_out: Array2<f64>,
        grads: &mut [Vec<f64>],
        need_input: bool,
    ) -> Option<Array2<f64>> {
        match (self, cache) {
            (
                Layer::Conv2d {
                    weight,
                    bias,
                    input,
                    out_channels,
                    kernel,
                },
                Cache::Input(x),
            ) => {
                let w = params[*weight].matrix();
                let (gw, gb) = split_two(grads, *weight, *bias);
                let gw = ArrayViewMut2::from_shape(w.dim(), gw).expect("weight gradient shape");
                conv_backward(x.view(), grad_out.view(), w, gw, gb, *input, *out_channels, *kernel, need_input)
            }
            (Layer::Act(Activation::Identity), _) => Some(grad_out),
            (Layer::Act(Activation::Relu), Cache::Input(x)) => {
                let mut g = grad_out;
                g.zip_mut_with(x, |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                });
                Some(g)
            }
            (Layer::Pool { kind: Pooling::Max, input }, Cache::Argmax(argmax)) => {
                Some(max_pool_backward(grad_out.view(), argmax, input.len()))
            }
            (Layer::Pool { kind: Pooling::Average, input }, _) => Some(avg_pool_backward(grad_out.view(), *input)),
            (Layer::Dense { weight, bias, in_dim, out_dim }, Cache::Input(x)) => {
                let (gw, gb) = split_two(grads, *weight, *bias);
                let mut gw = ArrayViewMut2::from_shape((*out_dim, *in_dim), gw).expect("weight gradient shape");
                gw += &grad_out.t().dot(x);
                for (acc, col) in gb.iter_mut().zip(grad_out.axis_iter(Axis(1))) {
                    *acc += col.sum();
                }
                need_input.then(|| grad_out.dot(&params[*weight].matrix()))
            }
            _ => unreachable!("backward called without a forward cache"),
        }
    }
}

fn split_two(grads: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a][..], &mut hi[0][..])
}

/// Unfolds one image into a `(cin·k·k, h·w)` patch matrix with zero "same" padding.
fn im2col(image: &[f64], shape: ImageShape, kernel: usize, cols: &mut [f64]) {
    let pad = (kernel / 2) as isize;
    let (h, w) = (shape.height as isize, shape.width as isize);
    let plane = shape.plane();
    for c in 0..shape.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let line = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    for (x, slot) in line.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *slot = if sx < 0 || sx >= w { 0.0 } else { src[(sy * w + sx) as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a patch-gradient matrix back onto the image it came from.
fn col2im(cols: &[f64], shape: ImageShape, kernel: usize, image: &mut [f64]) {
    let pad = (kernel / 2) as isize;
    let (h, w) = (shape.height as isize, shape.width as isize);
    let plane = shape.plane();
    for c in 0..shape.channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx;
                        if sx >= 0 && sx < w {
                            image[c * plane + (sy * w + sx) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    b: &[f64],
    input: ImageShape,
    out_channels: usize,
    kernel: usize,
) -> Array2<f64> {
    let plane = input.plane();
    let patch = input.channels * kernel * kernel;
    let mut out = Array2::zeros((x.nrows(), out_channels * plane));
    let mut cols = Array2::zeros((patch, plane));
    for (row, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let image = row.as_slice().expect("contiguous sample");
        im2col(image, input, kernel, cols.as_slice_mut().expect("contiguous"));
        let y = w.dot(&cols);
        let dst = dst.as_slice_mut().expect("contiguous output");
        for (c, (chunk, yrow)) in dst.chunks_mut(plane).zip(y.axis_iter(Axis(0))).enumerate() {
            for (o, &v) in chunk.iter_mut().zip(yrow.iter()) {
                *o = v + b[c];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: ArrayView2<f64>,
    grad_out: ArrayView2<f64>,
    w: ArrayView2<f64>,
    mut gw: ArrayViewMut2<f64>,
    gb: &mut [f64],
    input: ImageShape,
    out_channels: usize,
    kernel: usize,
    need_input: bool,
) -> Option<Array2<f64>> {
    let plane = input.plane();
    let patch = input.channels * kernel * kernel;
    let mut cols = Array2::zeros((patch, plane));
    let mut grad_in = need_input.then(|| Array2::zeros(x.dim()));
    for (b, row) in x.axis_iter(Axis(0)).enumerate() {
        let image = row.as_slice().expect("contiguous sample");
        im2col(image, input, kernel, cols.as_slice_mut().expect("contiguous"));
        let g = grad_out.row(b);
        let g = g.to_shape((out_channels, plane)).expect("output gradient shape");
        gw += &g.dot(&cols.t());
        for (acc, grow) in gb.iter_mut().zip(g.axis_iter(Axis(0))) {
            *acc += grow.sum();
        }
        if let Some(grad_in) = grad_in.as_mut() {
            let dcols = w.t().dot(&g);
            let mut dst = grad_in.row_mut(b);
            col2im(
                dcols.as_slice().expect("contiguous"),
                input,
                kernel,
                dst.as_slice_mut().expect("contiguous"),
            );
        }
    }
    grad_in
}

fn max_pool_forward(x: ArrayView2<f64>, input: ImageShape) -> (Array2<f64>, Vec<u32>) {
    let (oh, ow) = (input.height / 2, input.width / 2);
    let out_len = input.channels * oh * ow;
    let mut out = Array2::zeros((x.nrows(), out_len));
    let mut argmax = Vec::with_capacity(x.nrows() * out_len);
    for (row, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let src = row.as_slice().expect("contiguous sample");
        let mut o = 0;
        for c in 0..input.channels {
            let base = c * input.plane();
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + (2 * y) * input.width + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * input.width + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    dst[o] = src[best];
                    argmax.push(best as u32);
                    o += 1;
                }
            }
        }
    }
    (out, argmax)
}

fn max_pool_backward(grad_out: ArrayView2<f64>, argmax: &[u32], in_len: usize) -> Array2<f64> {
    let out_len = grad_out.ncols();
    let mut grad = Array2::zeros((grad_out.nrows(), in_len));
    for (b, (g, mut dst)) in grad_out.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).enumerate() {
        let idx = &argmax[b * out_len..(b + 1) * out_len];
        for (&i, &v) in idx.iter().zip(g.iter()) {
            dst[i as usize] += v;
        }
    }
    grad
}

fn avg_pool_forward(x: ArrayView2<f64>, input: ImageShape) -> Array2<f64> {
    let (oh, ow) = (input.height / 2, input.width / 2);
    let mut out = Array2::zeros((x.nrows(), input.channels * oh * ow));
    for (row, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let mut o = 0;
        for c in 0..input.channels {
            let base = c * input.plane();
            for y in 0..oh {
                for xx in 0..ow {
                    let at = |dy: usize, dx: usize| row[base + (2 * y + dy) * input.width + 2 * xx + dx];
                    dst[o] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                    o += 1;
                }
            }
        }
    }
    out
}

fn avg_pool_backward(grad_out: ArrayView2<f64>, input: ImageShape) -> Array2<f64> {
    let (oh, ow) = (input.height / 2, input.width / 2);
    let mut grad = Array2::zeros((grad_out.nrows(), input.len()));
    for (g, mut dst) in grad_out.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))) {
        let mut o = 0;
        for c in 0..input.channels {
            let base = c * input.plane();
            for y in 0..oh {
                for xx in 0..ow {
                    let share = 0.25 * g[o];
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dst[base + (2 * y + dy) * input.width + 2 * xx + dx] += share;
                    }
                    o += 1;
                }
            }
        }
    }
    grad
}
