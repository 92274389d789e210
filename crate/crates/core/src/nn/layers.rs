//! Layer implementations. Each layer caches what its backward pass needs
//! during `forward`, and `backward` accumulates parameter gradients and
//! returns the gradient with respect to the layer input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, with optional transposes
/// expressed through strides. `c` is overwritten (`beta = 0`) or
/// accumulated into (`beta = 1`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides describe in-bounds row-major views of slices whose
    // lengths are checked by the debug assertions below.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Param,
    /// When false, `backward` skips the input gradient and returns zeros
    /// (first layer of a network).
    pub input_grad: bool,
    gemm_only: bool,
    cols: Vec<Vec<f64>>,
    input: Vec<f64>,
    in_shape: Vec<usize>,
}

/// The direct stride-1 loop beats im2col + GEMM on wide planes with few
/// channel pairs; elsewhere GEMM wins.
const DIRECT_CONV_MAX_PAIRS: usize = 256;
const DIRECT_CONV_MIN_WIDTH: usize = 48;

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::zeros(vec![out_channels, in_channels, kernel, kernel]),
            bias: Param::zeros(vec![out_channels]),
            input_grad: true,
            gemm_only: false,
            cols: Vec::new(),
            input: Vec::new(),
            in_shape: Vec::new(),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Shape(format!(
                "conv input {h}x{w} smaller than kernel {k}"
            )));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut cols = vec![0.0; self.in_channels * k * k * oh * ow];
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn direct(&self, width: usize) -> bool {
        !self.gemm_only
            && self.stride == 1
            && width >= DIRECT_CONV_MIN_WIDTH
            && self.in_channels * self.out_channels <= DIRECT_CONV_MAX_PAIRS
    }

    /// Valid output-column range for kernel column `kj` (stride 1).
    fn ox_range(&self, kj: usize, w: usize, ow: usize) -> (usize, usize) {
        let p = self.padding;
        let lo = p.saturating_sub(kj);
        let hi = ow.min((w + p).saturating_sub(kj));
        (lo, hi.max(lo))
    }

    fn direct_forward(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
        let (k, p) = (self.kernel, self.padding);
        let ranges: Vec<(usize, usize)> = (0..k).map(|kj| self.ox_range(kj, w, ow)).collect();
        for o in 0..self.out_channels {
            let wo = &self.weight.value
                [o * self.in_channels * k * k..(o + 1) * self.in_channels * k * k];
            for oy in 0..oh {
                let row = &mut out[(o * oh + oy) * ow..(o * oh + oy + 1) * ow];
                row.fill(self.bias.value[o]);
                for c in 0..self.in_channels {
                    for ki in 0..k {
                        let iy = (oy + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        for (kj, &(lo, hi)) in ranges.iter().enumerate() {
                            let wv = wo[(c * k + ki) * k + kj];
                            let src = &xrow[lo + kj - p..hi + kj - p];
                            for (d, s) in row[lo..hi].iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn direct_backward(
        &mut self,
        i: usize,
        dy: &[f64],
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        dx: &mut [f64],
    ) {
        let (k, p) = (self.kernel, self.padding);
        let in_len = self.in_channels * h * w;
        let x = &self.input[i * in_len..(i + 1) * in_len];
        let ranges: Vec<(usize, usize)> = (0..k).map(|kj| self.ox_range(kj, w, ow)).collect();
        let per_out = self.in_channels * k * k;
        for o in 0..self.out_channels {
            let wo = &self.weight.value[o * per_out..(o + 1) * per_out];
            let dwo = &mut self.weight.grad[o * per_out..(o + 1) * per_out];
            for oy in 0..oh {
                let grow = &dy[(o * oh + oy) * ow..(o * oh + oy + 1) * ow];
                for c in 0..self.in_channels {
                    for ki in 0..k {
                        let iy = (oy + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let off = (c * h + iy as usize) * w;
                        let xrow = &x[off..off + w];
                        for (kj, &(lo, hi)) in ranges.iter().enumerate() {
                            let widx = (c * k + ki) * k + kj;
                            let g = &grow[lo..hi];
                            let xs = &xrow[lo + kj - p..hi + kj - p];
                            dwo[widx] += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                            if self.input_grad {
                                let wv = wo[widx];
                                let dst = &mut dx[off + lo + kj - p..off + hi + kj - p];
                                for (d, gv) in dst.iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 4 || x.shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "conv2d expects [B, {}, H, W], got {:?}",
                self.in_channels, x.shape
            )));
        }
        let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
        let (oh, ow) = self.out_hw(h, w)?;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let oc = self.out_channels;
        let mut out = vec![0.0; b * oc * oh * ow];
        self.cols.clear();
        self.in_shape = x.shape.clone();
        if self.direct(w) {
            let in_len = self.in_channels * h * w;
            for i in 0..b {
                let xi = &x.data[i * in_len..(i + 1) * in_len];
                let oi = &mut out[i * oc * oh * ow..(i + 1) * oc * oh * ow];
                self.direct_forward(xi, h, w, oh, ow, oi);
            }
            self.input = x.data.clone();
            return Ok(Tensor::new(vec![b, oc, oh, ow], out));
        }
        for i in 0..b {
            let xi = &x.data[i * self.in_channels * h * w..(i + 1) * self.in_channels * h * w];
            let cols = self.im2col(xi, h, w, oh, ow);
            let oi = &mut out[i * oc * oh * ow..(i + 1) * oc * oh * ow];
            for (c, chunk) in oi.chunks_mut(oh * ow).enumerate() {
                chunk.fill(self.bias.value[c]);
            }
            gemm(
                oc,
                ckk,
                oh * ow,
                &self.weight.value,
                false,
                &cols,
                false,
                1.0,
                oi,
            );
            self.cols.push(cols);
        }
        Ok(Tensor::new(vec![b, oc, oh, ow], out))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (b, h, w) = (self.in_shape[0], self.in_shape[2], self.in_shape[3]);
        let (oh, ow) = (dy.shape[2], dy.shape[3]);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let oc = self.out_channels;
        let in_len = self.in_channels * h * w;
        let mut dx = vec![0.0; b * in_len];
        let mut dcols = Vec::new();
        for i in 0..b {
            let dyi = &dy.data[i * oc * oh * ow..(i + 1) * oc * oh * ow];
            for (c, chunk) in dyi.chunks(oh * ow).enumerate() {
                self.bias.grad[c] += chunk.iter().sum::<f64>();
            }
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            if self.direct(w) {
                self.direct_backward(i, dyi, h, w, oh, ow, dxi);
                continue;
            }
            // dW += dY · colsᵀ
            gemm(
                oc,
                oh * ow,
                ckk,
                dyi,
                false,
                &self.cols[i],
                true,
                1.0,
                &mut self.weight.grad,
            );
            if self.input_grad {
                // dcols = Wᵀ · dY
                dcols.resize(ckk * oh * ow, 0.0);
                gemm(
                    ckk,
                    oc,
                    oh * ow,
                    &self.weight.value,
                    true,
                    dyi,
                    false,
                    0.0,
                    &mut dcols,
                );
                self.col2im(&dcols, h, w, oh, ow, dxi);
            }
        }
        Tensor::new(self.in_shape.clone(), dx)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    cached_train: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: Vec::new(),
            cached_train: false,
        }
    }

    #[allow(clippy::needless_range_loop)]
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        if x.shape.len() != 4 || x.shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm2d expects [B, {}, H, W], got {:?}",
                self.channels, x.shape
            )));
        }
        let (b, c, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
        if training && b < 2 {
            return Err(Error::InvalidInput(
                "batchnorm in training mode needs a batch of at least 2".into(),
            ));
        }
        let m = (b * hw) as f64;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let plane = |i: usize| &x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let (mean, var) = if training {
                let mean = (0..b).map(|i| plane(i).iter().sum::<f64>()).sum::<f64>() / m;
                let var = (0..b)
                    .map(|i| plane(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / m;
                self.running_mean[ch] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean;
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                self.running_var[ch] =
                    (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..b {
                let off = (i * c + ch) * hw;
                for k in 0..hw {
                    let xh = (x.data[off + k] - mean) * is;
                    xhat[off + k] = xh;
                    out[off + k] = g * xh + bt;
                }
            }
        }
        self.xhat = xhat;
        self.inv_std = inv_std;
        self.shape = x.shape.clone();
        self.cached_train = training;
        Ok(Tensor::new(x.shape.clone(), out))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (b, c, hw) = (self.shape[0], self.shape[1], self.shape[2] * self.shape[3]);
        let m = (b * hw) as f64;
        let mut dx = vec![0.0; dy.len()];
        for ch in 0..c {
            let g = self.gamma.value[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..b {
                let off = (i * c + ch) * hw;
                for k in 0..hw {
                    sum_dy += dy.data[off + k];
                    sum_dy_xhat += dy.data[off + k] * self.xhat[off + k];
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let is = self.inv_std[ch];
            for i in 0..b {
                let off = (i * c + ch) * hw;
                for k in 0..hw {
                    dx[off + k] = if self.cached_train {
                        g * is / m
                            * (m * dy.data[off + k] - sum_dy - self.xhat[off + k] * sum_dy_xhat)
                    } else {
                        g * is * dy.data[off + k]
                    };
                }
            }
        }
        Tensor::new(self.shape.clone(), dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        Tensor::new(
            x.shape.clone(),
            x.data.iter().map(|&v| v.max(0.0)).collect(),
        )
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let data = dy
            .data
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::new(dy.shape.clone(), data)
    }
}

/// Non-overlapping-or-strided max pooling; gradient goes to the first
/// maximal element of each window.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            argmax: Vec::new(),
            in_shape: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 4 || x.shape[2] < self.kernel || x.shape[3] < self.kernel {
            return Err(Error::Shape(format!(
                "maxpool input {:?} too small",
                x.shape
            )));
        }
        let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (k, s) = (self.kernel, self.stride);
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base + oy * s * w + ox * s;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * s + ky) * w + ox * s + kx;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        self.argmax = argmax;
        self.in_shape = x.shape.clone();
        Ok(Tensor::new(vec![b, c, oh, ow], out))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(self.in_shape.clone());
        for (g, &idx) in dy.data.iter().zip(&self.argmax) {
            dx.data[idx] += g;
        }
        dx
    }
}

/// Adaptive average pooling to 1×1, emitted flattened as `[B, C]`.
#[derive(Debug, Clone, Default)]
pub struct AdaptiveAvgPool2d {
    in_shape: Vec<usize>,
}

impl AdaptiveAvgPool2d {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "avgpool expects 4D input, got {:?}",
                x.shape
            )));
        }
        let (b, c, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
        let out = x
            .data
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.in_shape = x.shape.clone();
        Ok(Tensor::new(vec![b, c], out))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let hw = self.in_shape[2] * self.in_shape[3];
        let mut data = Vec::with_capacity(dy.len() * hw);
        for &g in &dy.data {
            data.extend(std::iter::repeat_n(g / hw as f64, hw));
        }
        Tensor::new(self.in_shape.clone(), data)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
    input: Vec<f64>,
    batch: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::zeros(vec![out_features, in_features]),
            bias: Param::zeros(vec![out_features]),
            input: Vec::new(),
            batch: 0,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || x.shape[1] != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects [B, {}], got {:?}",
                self.in_features, x.shape
            )));
        }
        let b = x.shape[0];
        let mut out = Vec::with_capacity(b * self.out_features);
        for _ in 0..b {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(
            b,
            self.in_features,
            self.out_features,
            &x.data,
            false,
            &self.weight.value,
            true,
            1.0,
            &mut out,
        );
        self.input = x.data.clone();
        self.batch = b;
        Ok(Tensor::new(vec![b, self.out_features], out))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (b, i, o) = (self.batch, self.in_features, self.out_features);
        for row in dy.data.chunks(o) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        gemm(
            o,
            b,
            i,
            &dy.data,
            true,
            &self.input,
            false,
            1.0,
            &mut self.weight.grad,
        );
        let mut dx = vec![0.0; b * i];
        gemm(
            b,
            o,
            i,
            &dy.data,
            false,
            &self.weight.value,
            false,
            0.0,
            &mut dx,
        );
        Tensor::new(vec![b, i], dx)
    }
}

/// Inverted dropout. With `frozen` set, the previous mask is reused so the
/// layer becomes a fixed linear map (used by gradient checks).
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub frozen: bool,
    mask: Vec<f64>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Dropout {
            rate,
            frozen: false,
            mask: Vec::new(),
        }
    }

    pub fn forward(
        &mut self,
        x: &Tensor,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        if !training || self.rate == 0.0 {
            self.mask = vec![1.0; x.len()];
            return Ok(x.clone());
        }
        if !(self.frozen && self.mask.len() == x.len()) {
            let rng = rng.ok_or_else(|| {
                Error::InvalidInput("dropout in training mode needs a random stream".into())
            })?;
            let keep = 1.0 / (1.0 - self.rate);
            self.mask = (0..x.len())
                .map(|_| {
                    if rng.random::<f64>() < self.rate {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect();
        }
        let data = x.data.iter().zip(&self.mask).map(|(v, m)| v * m).collect();
        Ok(Tensor::new(x.shape.clone(), data))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let data = dy.data.iter().zip(&self.mask).map(|(g, m)| g * m).collect();
        Tensor::new(dy.shape.clone(), data)
    }
}
