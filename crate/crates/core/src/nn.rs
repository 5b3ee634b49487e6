//! Minimal planar tensors and layers with hand-written backward passes.
//!
//! Models keep all parameters in one flat `Vec<f64>`; a [`Conv`] only records
//! where its weights and bias live in that vector. Gradients use the same
//! layout, so optimizers, checkpoints and digests all work on plain slices.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Planar `C×H×W` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor size mismatch");
        Self { c, h, w, data }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn ensure_finite(&self, layer: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite activation after layer '{layer}'")))
        }
    }

    /// Replicates the last row/column out to `h×w`.
    pub fn pad_replicate(&self, h: usize, w: usize) -> Tensor {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..h {
                let sy = y.min(self.h - 1);
                for x in 0..w {
                    let sx = x.min(self.w - 1);
                    out.data[(c * h + y) * w + x] = self.data[(c * self.h + sy) * self.w + sx];
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::pad_replicate`]: folds the padded border back
    /// onto the edge pixels of an `h×w` tensor.
    pub fn pad_replicate_backward(&self, h: usize, w: usize) -> Tensor {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..self.h {
                let sy = y.min(h - 1);
                for x in 0..self.w {
                    let sx = x.min(w - 1);
                    out.data[(c * h + sy) * w + sx] += self.data[(c * self.h + y) * self.w + x];
                }
            }
        }
        out
    }

    /// Top-left `h×w` window.
    pub fn crop(&self, h: usize, w: usize) -> Tensor {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..h {
                let src = (c * self.h + y) * self.w;
                out.data[(c * h + y) * w..(c * h + y) * w + w]
                    .copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Adjoint of [`Tensor::crop`]: embeds into a zero `h×w` tensor.
    pub fn uncrop(&self, h: usize, w: usize) -> Tensor {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..self.h {
                let dst = (c * h + y) * w;
                out.data[dst..dst + self.w]
                    .copy_from_slice(&self.data[(c * self.h + y) * self.w..(c * self.h + y + 1) * self.w]);
            }
        }
        out
    }
}

/// Same-padded (zero), stride-1 convolution with an odd square kernel.
///
/// Weights are stored `[cout][cin][ky][kx]` at `w_off`, bias at `b_off`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv {
    /// Allocates the layer at `*offset` and advances it.
    pub fn alloc(cin: usize, cout: usize, k: usize, offset: &mut usize) -> Self {
        let w_off = *offset;
        let b_off = w_off + cout * cin * k * k;
        *offset = b_off + cout;
        Self {
            cin,
            cout,
            k,
            w_off,
            b_off,
        }
    }

    pub fn n_weights(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.w_off..self.w_off + self.n_weights()]
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.b_off..self.b_off + self.cout]
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init<R: Rng>(&self, params: &mut [f64], gain: f64, rng: &mut R) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("valid std");
        for p in &mut params[self.w_off..self.w_off + self.n_weights()] {
            *p = normal.sample(rng);
        }
        params[self.b_off..self.b_off + self.cout].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let (h, w, k) = (x.h, x.w, self.k);
        let r = (k / 2) as isize;
        let n = h * w;
        let weights = self.weights(params);
        let bias = self.bias(params);
        let mut out = Tensor::zeros(self.cout, h, w);
        for co in 0..self.cout {
            let dst = &mut out.data[co * n..(co + 1) * n];
            dst.fill(bias[co]);
            for ci in 0..self.cin {
                let src = x.plane(ci);
                for ky in 0..k {
                    let dy = ky as isize - r;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let wt = weights[((co * self.cin + ci) * k + ky) * k + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - r;
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor,
        gy: &Tensor,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Tensor> {
        let (h, w, k) = (x.h, x.w, self.k);
        let r = (k / 2) as isize;
        let n = h * w;
        let mut gx = want_input.then(|| Tensor::zeros(self.cin, h, w));
        for co in 0..self.cout {
            let g = gy.plane(co);
            grads[self.b_off + co] += g.iter().sum::<f64>();
            for ci in 0..self.cin {
                let src = x.plane(ci);
                for ky in 0..k {
                    let dy = ky as isize - r;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - r;
                        let (x0, x1) = valid_range(w, dx);
                        let wi = ((co * self.cin + ci) * k + ky) * k + kx;
                        let wt = params[self.w_off + wi];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let s0 = sy * w + (x0 as isize + dx) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let srow = &src[s0..s0 + (x1 - x0)];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gx) = gx.as_mut() {
                                let dst = &mut gx.data[ci * n + s0..ci * n + s0 + (x1 - x0)];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += wt * gv;
                                }
                            }
                        }
                        grads[self.w_off + wi] += acc;
                    }
                }
            }
        }
        gx
    }

    /// Upper bound on `max |output|` given `max |input| ≤ input_bound`.
    pub fn output_bound(&self, params: &[f64], input_bound: f64) -> f64 {
        let weights = self.weights(params);
        let per = self.cin * self.k * self.k;
        (0..self.cout)
            .map(|co| {
                let l1: f64 = weights[co * per..(co + 1) * per].iter().map(|w| w.abs()).sum();
                l1 * input_bound + self.bias(params)[co].abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Output rows `[start, end)` whose source `row + d` lies inside `0..len`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let start = (-d).max(0) as usize;
    let end = (len as isize - d).min(len as isize).max(0) as usize;
    (start.min(end), end)
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect(),
        ..*x
    }
}

/// Backward through [`leaky_relu`] given its pre-activation input.
pub fn leaky_relu_backward(pre: &Tensor, gy: &Tensor) -> Tensor {
    Tensor {
        data: pre
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { LEAKY_SLOPE * g })
            .collect(),
        ..*pre
    }
}

/// 2×2 average pooling; `h` and `w` must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.plane(c);
        for y in 0..h2 {
            for xx in 0..w2 {
                let a = src[(2 * y) * x.w + 2 * xx];
                let b = src[(2 * y) * x.w + 2 * xx + 1];
                let d = src[(2 * y + 1) * x.w + 2 * xx];
                let e = src[(2 * y + 1) * x.w + 2 * xx + 1];
                out.data[(c * h2 + y) * w2 + xx] = 0.25 * (a + b + d + e);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(gy: &Tensor) -> Tensor {
    let (h, w) = (gy.h * 2, gy.w * 2);
    let mut out = Tensor::zeros(gy.c, h, w);
    for c in 0..gy.c {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = 0.25 * gy.data[(c * gy.h + y / 2) * gy.w + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(gy: &Tensor) -> Tensor {
    let (h2, w2) = (gy.h / 2, gy.w / 2);
    let mut out = Tensor::zeros(gy.c, h2, w2);
    for c in 0..gy.c {
        for y in 0..gy.h {
            for x in 0..gy.w {
                out.data[(c * h2 + y / 2) * w2 + x / 2] += gy.data[(c * gy.h + y) * gy.w + x];
            }
        }
    }
    out
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Splits a gradient for [`concat`] back into its two parts.
pub fn split(g: &Tensor, first_channels: usize) -> (Tensor, Tensor) {
    let n = g.h * g.w * first_channels;
    (
        Tensor::from_vec(first_channels, g.h, g.w, g.data[..n].to_vec()),
        Tensor::from_vec(g.c - first_channels, g.h, g.w, g.data[n..].to_vec()),
    )
}

/// SGD with classical momentum over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, n_params: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}
