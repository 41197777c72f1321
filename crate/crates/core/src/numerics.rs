//! Dense NCHW tensors and the differentiable primitives the network is built
//! from. Every operation has an explicit forward and backward pass; nothing
//! here records a graph.
//!
//! Kernels parallelize over independent output planes only, so each output
//! scalar is produced by exactly one thread with a fixed accumulation order.
//! Results are therefore bitwise independent of the rayon pool size.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Batch, channel, height and width extents of a [`Tensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major `(n, c, h, w)` array of `f64`.
///
/// Gradients are returned from the backward functions as separate tensors
/// rather than attached to their primal.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// A `1×1×1×1` tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h × w` plane at batch index `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        check_same(self.shape, other.shape, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        check_same(self.shape, other.shape, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        check_same(self.shape, other.shape, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        check_same(self.shape, other.shape, op)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

pub(crate) fn check_same(left: Shape, right: Shape, op: &'static str) -> Result<()> {
    if left != right {
        return Err(Error::ShapeMismatch { op, left, right });
    }
    Ok(())
}

/// Weights `(out_c, in_c, k, k)` and per-output-channel bias of a stride-1,
/// zero-padded "same" convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Conv2dParams {
    pub fn zeros(in_c: usize, out_c: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
        }
        Ok(Conv2dParams {
            weight: Tensor::zeros(Shape::new(out_c, in_c, k, k)),
            bias: vec![0.0; out_c],
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn padding(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.h != s.w || s.h.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "convolution kernel must be square and odd, weight shape is {s}"
            )));
        }
        if self.bias.len() != s.n {
            return Err(Error::invalid(format!(
                "bias has {} entries for {} output channels",
                self.bias.len(),
                s.n
            )));
        }
        Ok(())
    }
}

/// Zero-padded stride-1 convolution; output keeps the input's spatial size.
pub fn conv2d(input: &Tensor, params: &Conv2dParams) -> Result<Tensor> {
    params.validate()?;
    let s = input.shape();
    let ws = params.weight.shape();
    if s.c != ws.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: s,
            right: ws,
        });
    }
    let (h, w, k) = (s.h, s.w, ws.h);
    let pad = params.padding() as isize;
    let out_shape = Shape::new(s.n, ws.n, h, w);
    let mut out = vec![0.0; out_shape.len()];
    if out.is_empty() {
        return Tensor::from_vec(out_shape, out);
    }

    out.par_chunks_mut(h * w).enumerate().for_each(|(idx, plane)| {
        let (n, o) = (idx / ws.n, idx % ws.n);
        plane.fill(params.bias[o]);
        for i in 0..s.c {
            let src = input.plane(n, i);
            let kernel = params.weight.plane(o, i);
            for dy in 0..k {
                let oy = dy as isize - pad;
                let (y0, y1) = valid_range(h, oy);
                for dx in 0..k {
                    let wv = kernel[dy * k + dx];
                    let ox = dx as isize - pad;
                    let (x0, x1) = valid_range(w, ox);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let sx = (x0 as isize + ox) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let row = &src[sy * w + sx..sy * w + sx + (x1 - x0)];
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Output positions `[lo, hi)` along an axis of length `len` whose source
/// index `pos + offset` stays inside the axis.
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(len), hi)
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(input: &Tensor, params: &Conv2dParams, grad_out: &Tensor) -> Result<Conv2dGrads> {
    params.validate()?;
    let s = input.shape();
    let ws = params.weight.shape();
    if s.c != ws.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: s,
            right: ws,
        });
    }
    let out_shape = Shape::new(s.n, ws.n, s.h, s.w);
    check_same(grad_out.shape(), out_shape, "conv2d_backward")?;
    let (h, w, k) = (s.h, s.w, ws.h);
    let pad = params.padding() as isize;

    let mut grad_input = Tensor::zeros(s);
    if !grad_input.is_empty() {
        grad_input
            .data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(idx, plane)| {
                let (n, i) = (idx / s.c, idx % s.c);
                for o in 0..ws.n {
                    let g = grad_out.plane(n, o);
                    let kernel = params.weight.plane(o, i);
                    for dy in 0..k {
                        let oy = dy as isize - pad;
                        let (y0, y1) = valid_range(h, oy);
                        for dx in 0..k {
                            let wv = kernel[dy * k + dx];
                            let ox = dx as isize - pad;
                            let (x0, x1) = valid_range(w, ox);
                            if x0 >= x1 {
                                continue;
                            }
                            for y in y0..y1 {
                                let sy = (y as isize + oy) as usize;
                                let sx = (x0 as isize + ox) as usize;
                                let dst = &mut plane[sy * w + sx..sy * w + sx + (x1 - x0)];
                                let row = &g[y * w + x0..y * w + x1];
                                for (d, v) in dst.iter_mut().zip(row) {
                                    *d += wv * v;
                                }
                            }
                        }
                    }
                }
            });
    }

    let mut grad_weight = Tensor::zeros(ws);
    grad_weight
        .data_mut()
        .par_chunks_mut(k * k)
        .enumerate()
        .for_each(|(idx, taps)| {
            let (o, i) = (idx / ws.c, idx % ws.c);
            for n in 0..s.n {
                let g = grad_out.plane(n, o);
                let src = input.plane(n, i);
                for dy in 0..k {
                    let oy = dy as isize - pad;
                    let (y0, y1) = valid_range(h, oy);
                    for dx in 0..k {
                        let ox = dx as isize - pad;
                        let (x0, x1) = valid_range(w, ox);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            let sx = (x0 as isize + ox) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + sx..sy * w + sx + (x1 - x0)];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        taps[dy * k + dx] += acc;
                    }
                }
            }
        });

    let grad_bias = (0..ws.n)
        .map(|o| (0..s.n).map(|n| grad_out.plane(n, o).iter().sum::<f64>()).sum())
        .collect();

    Ok(Conv2dGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel affine batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub stats_momentum: f64,
}

impl BatchNormParams {
    /// Identity affine map, running statistics `(0, 1)`.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            stats_momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn apply_stats(&mut self, stats: &RunningStats) {
        self.running_mean.clone_from(&stats.mean);
        self.running_var.clone_from(&stats.var);
    }

    fn validate(&self, c: usize) -> Result<()> {
        let c_ok = [&self.gamma, &self.beta, &self.running_mean, &self.running_var]
            .iter()
            .all(|v| v.len() == c);
        if !c_ok {
            return Err(Error::invalid(format!(
                "batch norm parameters do not match {c} input channels"
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("batch norm eps must be positive"));
        }
        if self.running_var.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("batch norm running variance is negative"));
        }
        Ok(())
    }
}

/// Running statistics after one train-mode step, to be committed by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    mode: Mode,
    stats: Option<RunningStats>,
}

impl BnCache {
    /// Updated running statistics; `None` for eval-mode calls.
    pub fn stats(&self) -> Option<&RunningStats> {
        self.stats.as_ref()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Batch normalization over `(n, h, w)` per channel.
///
/// Train mode normalizes with the biased batch variance and reports the
/// exponential-moving-average update of the running statistics (unbiased
/// variance) in the cache; `params` is left untouched.
pub fn batchnorm_forward(input: &Tensor, params: &BatchNormParams, mode: Mode) -> Result<(Tensor, BnCache)> {
    let s = input.shape();
    params.validate(s.c)?;
    let count = s.n * s.plane();

    let (mean, var, stats) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::invalid(format!(
                    "train-mode batch norm needs at least 2 values per channel, input is {s}"
                )));
            }
            let (mean, var) = channel_moments(input);
            let m = params.stats_momentum;
            let unbias = count as f64 / (count - 1) as f64;
            let stats = RunningStats {
                mean: (0..s.c)
                    .map(|c| (1.0 - m) * params.running_mean[c] + m * mean[c])
                    .collect(),
                var: (0..s.c)
                    .map(|c| (1.0 - m) * params.running_var[c] + m * var[c] * unbias)
                    .collect(),
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (params.running_mean.clone(), params.running_var.clone(), None),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let (mu, is) = (mean[c], inv_std[c]);
            let (g, b) = (params.gamma[c], params.beta[c]);
            for (xh, v) in x_hat.plane_mut(n, c).iter_mut().zip(src) {
                *xh = (v - mu) * is;
            }
            for (o, xh) in out.plane_mut(n, c).iter_mut().zip(x_hat.plane(n, c)) {
                *o = g * xh + b;
            }
        }
    }

    let cache = BnCache {
        x_hat,
        inv_std,
        gamma: params.gamma.clone(),
        mode,
        stats,
    };
    Ok((out, cache))
}

/// Eval-mode normalization without retaining a cache.
pub fn batchnorm_infer(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    let s = input.shape();
    params.validate(s.c)?;
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let is = 1.0 / (params.running_var[c] + params.eps).sqrt();
            let (mu, g, b) = (params.running_mean[c], params.gamma[c], params.beta[c]);
            for v in out.plane_mut(n, c) {
                *v = g * ((*v - mu) * is) + b;
            }
        }
    }
    Ok(out)
}

/// Per-channel mean and biased variance over `(n, h, w)`.
fn channel_moments(input: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = input.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let sum: f64 = (0..s.n).map(|n| input.plane(n, c).iter().sum::<f64>()).sum();
        let mu = sum / count;
        let ss: f64 = (0..s.n)
            .map(|n| input.plane(n, c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
            .sum();
        mean[c] = mu;
        var[c] = ss / count;
    }
    (mean, var)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Adjoint of [`batchnorm_forward`]. Train-mode caches propagate through the
/// batch statistics.
pub fn batchnorm_backward(cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
    let s = cache.x_hat.shape();
    check_same(grad_out.shape(), s, "batchnorm_backward")?;
    let count = (s.n * s.plane()) as f64;
    let mut grad_gamma = vec![0.0; s.c];
    let mut grad_beta = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let xh = cache.x_hat.plane(n, c);
            grad_beta[c] += g.iter().sum::<f64>();
            grad_gamma[c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    let mut grad_input = Tensor::zeros(s);
    for c in 0..s.c {
        let scale = cache.gamma[c] * cache.inv_std[c];
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let xh = cache.x_hat.plane(n, c);
            let dst = grad_input.plane_mut(n, c);
            match cache.mode {
                Mode::Train => {
                    let (db, dg) = (grad_beta[c], grad_gamma[c]);
                    for ((d, gv), xv) in dst.iter_mut().zip(g).zip(xh) {
                        *d = scale / count * (count * gv - db - xv * dg);
                    }
                }
                Mode::Eval => {
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d = scale * gv;
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: grad_input,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    input.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// The subgradient at exactly zero is taken as 1.
pub fn leaky_relu_backward(input: &Tensor, slope: f64, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_with(grad_out, "leaky_relu_backward", |x, g| if x >= 0.0 { g } else { slope * g })
}

/// Merge-and-run mapping: both outputs are the elementwise mean of the inputs.
pub fn merge_and_run_map(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let m = a.zip_with(b, "merge_and_run_map", |x, y| (x + y) * 0.5)?;
    Ok((m.clone(), m))
}

/// Adjoint of [`merge_and_run_map`]; both input gradients equal the mean of
/// the two output gradients.
pub fn merge_and_run_backward(grad_a: &Tensor, grad_b: &Tensor) -> Result<(Tensor, Tensor)> {
    merge_and_run_map(grad_a, grad_b)
}
