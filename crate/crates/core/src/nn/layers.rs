//! Trainable layers with explicit caches and hand-written backward passes.
//!
//! Convolutions run as one GEMM per batch over an im2col matrix built from a
//! zero-padded copy, with channel-major output so scatter/gather steps are
//! contiguous memcpys. BatchNorm works on raw channel planes. All loops are
//! slice-based; there is no threading and reduction order is fixed.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// A parameter tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct PTensor {
    pub data: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl PTensor {
    pub fn new(data: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(data.raw_dim());
        PTensor { data, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

fn kaiming_normal(rng: &mut ChaCha12Rng, fan_out: usize, shape: &[usize]) -> ArrayD<f32> {
    let std = (2.0 / fan_out as f32).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    // Box-Muller from the seeded stream; two uniforms per normal.
    for _ in 0..n {
        let u1: f32 = rng.random_range(f32::EPSILON..1.0);
        let u2: f32 = rng.random_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
        data.push(z * std);
    }
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape matches length")
}

/// Standard normal draws from the seeded stream.
pub fn randn(rng: &mut ChaCha12Rng, n: usize) -> Vec<f32> {
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let u1: f32 = rng.random_range(f32::EPSILON..1.0);
        let u2: f32 = rng.random_range(0.0..1.0);
        data.push((-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos());
    }
    data
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// Convolution stored GEMM-ready as `(c_out, c_in * k * k)`, no bias (a
/// norm layer follows everywhere it is used).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: PTensor,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    /// im2col matrix `(n * oh * ow, c_in * k * k)`.
    cols: Array2<f32>,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha12Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_out = c_out * kernel * kernel;
        let weight = PTensor::new(kaiming_normal(rng, fan_out, &[c_out, c_in * kernel * kernel]));
        Conv2d {
            weight,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Zero-padded copy of `x` as a flat buffer `(n, c, h + 2p, w + 2p)`.
    fn pad_input(&self, x: &Array4<f32>) -> (Vec<f32>, usize, usize) {
        let (n, c, h, w) = dims4(x);
        let p = self.pad;
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let xs = x.as_slice().expect("contiguous input");
        let mut out = vec![0.0f32; n * c * hp * wp];
        for plane in 0..n * c {
            let src_base = plane * h * w;
            let dst_base = plane * hp * wp;
            for row in 0..h {
                let src = src_base + row * w;
                let dst = dst_base + (row + p) * wp + p;
                out[dst..dst + w].copy_from_slice(&xs[src..src + w]);
            }
        }
        (out, hp, wp)
    }

    fn im2col(&self, x: &Array4<f32>) -> (Array2<f32>, usize, usize) {
        let (n, c, h, w) = dims4(x);
        debug_assert_eq!(c, self.c_in);
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let row_len = c * k * k;
        let (xp, _hp, wp) = self.pad_input(x);
        let mut cols = Array2::<f32>::zeros((n * oh * ow, row_len));
        let cs = cols.as_slice_mut().expect("contiguous cols");
        let hp = h + 2 * self.pad;
        for img in 0..n {
            for oy in 0..oh {
                let iy0 = oy * self.stride;
                for ox in 0..ow {
                    let ix0 = ox * self.stride;
                    let row_base = ((img * oh + oy) * ow + ox) * row_len;
                    for ch in 0..c {
                        let plane = (img * c + ch) * hp * wp;
                        for ky in 0..k {
                            let src = plane + (iy0 + ky) * wp + ix0;
                            let dst = row_base + (ch * k + ky) * k;
                            cs[dst..dst + k].copy_from_slice(&xp[src..src + k]);
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (n, _, h, w) = dims4(x);
        let (cols, oh, ow) = self.im2col(x);
        let wmat = self.weight.data.view().into_dimensionality::<Ix2>().unwrap();
        // (c_out, row_len) x (row_len, n*oh*ow): rows of y_t are channels.
        let y_t = wmat.dot(&cols.t());
        let spatial = oh * ow;
        let mut y = Array4::<f32>::zeros((n, self.c_out, oh, ow));
        {
            let ys = y.as_slice_mut().unwrap();
            let yt = y_t.as_slice().unwrap();
            for ch in 0..self.c_out {
                let src_row = ch * n * spatial;
                for img in 0..n {
                    let src = src_row + img * spatial;
                    let dst = (img * self.c_out + ch) * spatial;
                    ys[dst..dst + spatial].copy_from_slice(&yt[src..src + spatial]);
                }
            }
        }
        (
            y,
            ConvCache {
                cols,
                n,
                h,
                w,
                oh,
                ow,
            },
        )
    }

    /// Accumulates the weight gradient and returns dL/dx.
    pub fn backward(&mut self, cache: &ConvCache, grad_y: &Array4<f32>) -> Array4<f32> {
        let (n, oh, ow) = (cache.n, cache.oh, cache.ow);
        let k = self.kernel;
        let row_len = self.c_in * k * k;
        let spatial = oh * ow;
        // grad_y (n, c_out, oh, ow) -> channel-major (c_out, n*oh*ow).
        let mut gy_t = Array2::<f32>::zeros((self.c_out, n * spatial));
        {
            let gys = grad_y.as_slice().unwrap();
            let gm = gy_t.as_slice_mut().unwrap();
            for ch in 0..self.c_out {
                let dst_row = ch * n * spatial;
                for img in 0..n {
                    let src = (img * self.c_out + ch) * spatial;
                    let dst = dst_row + img * spatial;
                    gm[dst..dst + spatial].copy_from_slice(&gys[src..src + spatial]);
                }
            }
        }
        // dW = gy_t . cols
        let gw = gy_t.dot(&cache.cols);
        self.weight
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .scaled_add(1.0, &gw);
        // dcols = gy_t^T . W -> (n*oh*ow, row_len)
        let wmat = self.weight.data.view().into_dimensionality::<Ix2>().unwrap();
        let gcols = gy_t.t().dot(&wmat);
        // col2im scatter-add into a padded buffer, then crop.
        let p = self.pad;
        let (h, w) = (cache.h, cache.w);
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let mut gxp = vec![0.0f32; n * self.c_in * hp * wp];
        {
            let gc = gcols.as_slice().unwrap();
            for img in 0..n {
                for oy in 0..oh {
                    let iy0 = oy * self.stride;
                    for ox in 0..ow {
                        let ix0 = ox * self.stride;
                        let row_base = ((img * oh + oy) * ow + ox) * row_len;
                        for ch in 0..self.c_in {
                            let plane = (img * self.c_in + ch) * hp * wp;
                            for ky in 0..k {
                                let dst = plane + (iy0 + ky) * wp + ix0;
                                let src = row_base + (ch * k + ky) * k;
                                for kx in 0..k {
                                    gxp[dst + kx] += gc[src + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut gx = Array4::<f32>::zeros((n, self.c_in, h, w));
        {
            let gs = gx.as_slice_mut().unwrap();
            for plane in 0..n * self.c_in {
                let src_base = plane * hp * wp;
                let dst_base = plane * h * w;
                for row in 0..h {
                    let src = src_base + (row + p) * wp + p;
                    let dst = dst_base + row * w;
                    gs[dst..dst + w].copy_from_slice(&gxp[src..src + w]);
                }
            }
        }
        gx
    }
}

#[inline]
pub(crate) fn dims4(x: &Array4<f32>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode {
    /// Batch statistics; `ghost_splits` > 1 normalizes contiguous batch
    /// groups independently (no-gradient paths only).
    Train { ghost_splits: usize, update_running: bool },
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: PTensor,
    pub beta: PTensor,
    pub running_mean: ArrayD<f32>,
    pub running_var: ArrayD<f32>,
    pub eps: f32,
    pub momentum: f32,
    pub channels: usize,
}

pub struct Bn2dCache {
    xhat: Array4<f32>,
    invstd: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: PTensor::new(ArrayD::ones(vec![channels])),
            beta: PTensor::new(ArrayD::zeros(vec![channels])),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::ones(vec![channels]),
            eps: 1e-5,
            momentum: 0.1,
            channels,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: BnMode) -> (Array4<f32>, Option<Bn2dCache>) {
        let (n, c, h, w) = dims4(x);
        debug_assert_eq!(c, self.channels);
        let hw = h * w;
        let xs = x.as_slice().expect("contiguous");
        let gamma = self.gamma.data.as_slice().unwrap();
        let beta = self.beta.data.as_slice().unwrap();
        match mode {
            BnMode::Eval => {
                let rm = self.running_mean.as_slice().unwrap();
                let rv = self.running_var.as_slice().unwrap();
                let mut y = Array4::<f32>::zeros((n, c, h, w));
                let ys = y.as_slice_mut().unwrap();
                for img in 0..n {
                    for ch in 0..c {
                        let scale = gamma[ch] / (rv[ch] + self.eps).sqrt();
                        let shift = beta[ch] - rm[ch] * scale;
                        let base = (img * c + ch) * hw;
                        for (dst, src) in ys[base..base + hw].iter_mut().zip(&xs[base..base + hw])
                        {
                            *dst = src * scale + shift;
                        }
                    }
                }
                (y, None)
            }
            BnMode::Train {
                ghost_splits,
                update_running,
            } => {
                let splits = ghost_splits.max(1);
                assert!(
                    n % splits == 0,
                    "batch {n} not divisible into {splits} ghost groups"
                );
                let group = n / splits;
                let mut y = Array4::<f32>::zeros((n, c, h, w));
                let mut xhat = Array4::<f32>::zeros((n, c, h, w));
                let mut invstd_full = Array1::<f32>::zeros(c);
                let ys = y.as_slice_mut().unwrap();
                let xh = xhat.as_slice_mut().unwrap();
                for s in 0..splits {
                    let r0 = s * group;
                    let count = (group * hw) as f32;
                    for ch in 0..c {
                        let mut mean = 0.0f32;
                        for img in r0..r0 + group {
                            let base = (img * c + ch) * hw;
                            for v in &xs[base..base + hw] {
                                mean += v;
                            }
                        }
                        mean /= count;
                        let mut var = 0.0f32;
                        for img in r0..r0 + group {
                            let base = (img * c + ch) * hw;
                            for v in &xs[base..base + hw] {
                                let d = v - mean;
                                var += d * d;
                            }
                        }
                        var /= count;
                        let invstd = 1.0 / (var + self.eps).sqrt();
                        if splits == 1 {
                            invstd_full[ch] = invstd;
                        }
                        let (g, b) = (gamma[ch], beta[ch]);
                        for img in r0..r0 + group {
                            let base = (img * c + ch) * hw;
                            for i in base..base + hw {
                                let normed = (xs[i] - mean) * invstd;
                                xh[i] = normed;
                                ys[i] = normed * g + b;
                            }
                        }
                        if update_running && splits == 1 {
                            let unbiased = var * count / (count - 1.0).max(1.0);
                            let m = self.momentum;
                            let rm = &mut self.running_mean.as_slice_mut().unwrap()[ch];
                            *rm = (1.0 - m) * *rm + m * mean;
                            let rv = &mut self.running_var.as_slice_mut().unwrap()[ch];
                            *rv = (1.0 - m) * *rv + m * unbiased;
                        }
                    }
                }
                let cache = (splits == 1).then_some(Bn2dCache {
                    xhat,
                    invstd: invstd_full,
                });
                (y, cache)
            }
        }
    }

    pub fn backward(&mut self, cache: &Bn2dCache, grad_y: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = dims4(grad_y);
        let hw = h * w;
        let count = (n * hw) as f32;
        let gamma = self.gamma.data.as_slice().unwrap();
        let gys = grad_y.as_slice().unwrap();
        let xh = cache.xhat.as_slice().unwrap();
        let mut gx = Array4::<f32>::zeros((n, c, h, w));
        let gs = gx.as_slice_mut().unwrap();
        let ggamma = self.gamma.grad.as_slice_mut().unwrap();
        let gbeta = self.beta.grad.as_slice_mut().unwrap();
        for ch in 0..c {
            let mut sum_gy = 0.0f32;
            let mut sum_gy_xhat = 0.0f32;
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    sum_gy += gys[i];
                    sum_gy_xhat += gys[i] * xh[i];
                }
            }
            ggamma[ch] += sum_gy_xhat;
            gbeta[ch] += sum_gy;
            let scale = gamma[ch] * cache.invstd[ch] / count;
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    gs[i] = scale * (count * gys[i] - sum_gy - xh[i] * sum_gy_xhat);
                }
            }
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: PTensor,
    pub beta: PTensor,
    pub running_mean: ArrayD<f32>,
    pub running_var: ArrayD<f32>,
    pub eps: f32,
    pub momentum: f32,
    pub dim: usize,
}

pub struct Bn1dCache {
    xhat: Array2<f32>,
    invstd: Array1<f32>,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: PTensor::new(ArrayD::ones(vec![dim])),
            beta: PTensor::new(ArrayD::zeros(vec![dim])),
            running_mean: ArrayD::zeros(vec![dim]),
            running_var: ArrayD::ones(vec![dim]),
            eps: 1e-5,
            momentum: 0.1,
            dim,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, mode: BnMode) -> (Array2<f32>, Option<Bn1dCache>) {
        let (n, d) = (x.nrows(), x.ncols());
        debug_assert_eq!(d, self.dim);
        let gamma = self.gamma.data.as_slice().unwrap();
        let beta = self.beta.data.as_slice().unwrap();
        match mode {
            BnMode::Eval => {
                let rm = self.running_mean.as_slice().unwrap();
                let rv = self.running_var.as_slice().unwrap();
                let mut y = x.clone();
                for j in 0..d {
                    let scale = gamma[j] / (rv[j] + self.eps).sqrt();
                    let shift = beta[j] - rm[j] * scale;
                    y.column_mut(j).mapv_inplace(|v| v * scale + shift);
                }
                (y, None)
            }
            BnMode::Train {
                ghost_splits,
                update_running,
            } => {
                let splits = ghost_splits.max(1);
                assert!(n % splits == 0);
                let group = n / splits;
                let mut y = Array2::<f32>::zeros((n, d));
                let mut xhat = Array2::<f32>::zeros((n, d));
                let mut invstd_full = Array1::<f32>::zeros(d);
                for s in 0..splits {
                    let r0 = s * group;
                    for j in 0..d {
                        let mut mean = 0.0f32;
                        for i in r0..r0 + group {
                            mean += x[[i, j]];
                        }
                        mean /= group as f32;
                        let mut var = 0.0f32;
                        for i in r0..r0 + group {
                            let dv = x[[i, j]] - mean;
                            var += dv * dv;
                        }
                        var /= group as f32;
                        let invstd = 1.0 / (var + self.eps).sqrt();
                        if splits == 1 {
                            invstd_full[j] = invstd;
                        }
                        for i in r0..r0 + group {
                            let normed = (x[[i, j]] - mean) * invstd;
                            xhat[[i, j]] = normed;
                            y[[i, j]] = normed * gamma[j] + beta[j];
                        }
                        if update_running && splits == 1 {
                            let g = group as f32;
                            let unbiased = var * g / (g - 1.0).max(1.0);
                            let m = self.momentum;
                            let rm = &mut self.running_mean.as_slice_mut().unwrap()[j];
                            *rm = (1.0 - m) * *rm + m * mean;
                            let rv = &mut self.running_var.as_slice_mut().unwrap()[j];
                            *rv = (1.0 - m) * *rv + m * unbiased;
                        }
                    }
                }
                let cache = (splits == 1).then_some(Bn1dCache {
                    xhat,
                    invstd: invstd_full,
                });
                (y, cache)
            }
        }
    }

    pub fn backward(&mut self, cache: &Bn1dCache, grad_y: &Array2<f32>) -> Array2<f32> {
        let (n, d) = (grad_y.nrows(), grad_y.ncols());
        let gamma = self.gamma.data.as_slice().unwrap();
        let mut gx = Array2::<f32>::zeros((n, d));
        for j in 0..d {
            let mut sum_gy = 0.0f32;
            let mut sum_gy_xhat = 0.0f32;
            for i in 0..n {
                sum_gy += grad_y[[i, j]];
                sum_gy_xhat += grad_y[[i, j]] * cache.xhat[[i, j]];
            }
            self.gamma.grad.as_slice_mut().unwrap()[j] += sum_gy_xhat;
            self.beta.grad.as_slice_mut().unwrap()[j] += sum_gy;
            let scale = gamma[j] * cache.invstd[j] / n as f32;
            for i in 0..n {
                gx[[i, j]] = scale
                    * (n as f32 * grad_y[[i, j]] - sum_gy - cache.xhat[[i, j]] * sum_gy_xhat);
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`.
    pub weight: PTensor,
    pub bias: PTensor,
    pub dim_in: usize,
    pub dim_out: usize,
}

pub struct LinearCache {
    x: Array2<f32>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha12Rng, dim_in: usize, dim_out: usize) -> Self {
        // Uniform(-1/sqrt(in), 1/sqrt(in)).
        let bound = 1.0 / (dim_in as f32).sqrt();
        let n = dim_in * dim_out;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(rng.random_range(-bound..bound));
        }
        Linear {
            weight: PTensor::new(ArrayD::from_shape_vec(vec![dim_out, dim_in], data).unwrap()),
            bias: PTensor::new(ArrayD::zeros(vec![dim_out])),
            dim_in,
            dim_out,
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LinearCache) {
        let w = self.weight.data.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.data.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row += &b;
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, grad_y: &Array2<f32>) -> Array2<f32> {
        let gw = grad_y.t().dot(&cache.x);
        self.weight
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .scaled_add(1.0, &gw);
        let gb = grad_y.sum_axis(Axis(0));
        self.bias
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .scaled_add(1.0, &gb);
        let w = self.weight.data.view().into_dimensionality::<Ix2>().unwrap();
        grad_y.dot(&w)
    }
}

// ---------------------------------------------------------------------------
// ReLU and pooling helpers
// ---------------------------------------------------------------------------

pub fn relu4(x: &mut Array4<f32>) {
    for v in x.as_slice_mut().unwrap() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward when the forward output (post-ReLU) is available.
pub fn relu4_backward(y: &Array4<f32>, grad_y: &mut Array4<f32>) {
    let ys = y.as_slice().unwrap();
    for (g, v) in grad_y.as_slice_mut().unwrap().iter_mut().zip(ys) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn relu2(x: &mut Array2<f32>) {
    for v in x.as_slice_mut().unwrap() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn relu2_backward(y: &Array2<f32>, grad_y: &mut Array2<f32>) {
    let ys = y.as_slice().unwrap();
    for (g, v) in grad_y.as_slice_mut().unwrap().iter_mut().zip(ys) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Global average pool `(n, c, h, w)` -> `(n, c)`.
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let xs = x.as_slice().unwrap();
    let mut y = Array2::<f32>::zeros((n, c));
    let ys = y.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let base = plane * hw;
        let mut acc = 0.0f32;
        for v in &xs[base..base + hw] {
            acc += v;
        }
        ys[plane] = acc * inv;
    }
    y
}

pub fn global_avg_pool_backward(grad_y: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = (grad_y.nrows(), grad_y.ncols());
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    let gs = gx.as_slice_mut().unwrap();
    let gys = grad_y.as_slice().unwrap();
    for plane in 0..n * c {
        let g = gys[plane] * inv;
        for v in &mut gs[plane * hw..(plane + 1) * hw] {
            *v = g;
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Two-layer MLP head (projection / prediction)
// ---------------------------------------------------------------------------

/// `fc1 -> [bn] -> relu -> fc2`, the usual projection or prediction head.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub fc1: Linear,
    pub bn: Option<BatchNorm1d>,
    pub fc2: Linear,
}

pub struct MlpHeadCache {
    c1: LinearCache,
    bn: Option<Bn1dCache>,
    hidden: Array2<f32>,
    c2: LinearCache,
}

impl MlpHead {
    pub fn new(rng: &mut ChaCha12Rng, dim_in: usize, hidden: usize, out: usize, use_bn: bool) -> Self {
        MlpHead {
            fc1: Linear::new(rng, dim_in, hidden),
            bn: use_bn.then(|| BatchNorm1d::new(hidden)),
            fc2: Linear::new(rng, hidden, out),
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, mode: BnMode) -> (Array2<f32>, MlpHeadCache) {
        let (h1, c1) = self.fc1.forward(x);
        let (mut h, bn_cache) = match &mut self.bn {
            Some(bn) => bn.forward(&h1, mode),
            None => (h1, None),
        };
        relu2(&mut h);
        let (y, c2) = self.fc2.forward(&h);
        (
            y,
            MlpHeadCache {
                c1,
                bn: bn_cache,
                hidden: h,
                c2,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpHeadCache, grad_y: &Array2<f32>) -> Array2<f32> {
        let mut gh = self.fc2.backward(&cache.c2, grad_y);
        relu2_backward(&cache.hidden, &mut gh);
        let gh = match (&mut self.bn, &cache.bn) {
            (Some(bn), Some(bc)) => bn.backward(bc, &gh),
            _ => gh,
        };
        self.fc1.backward(&cache.c1, &gh)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut PTensor>) {
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        if let Some(bn) = &mut self.bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f32>)) {
        f(format!("{prefix}.fc1.weight"), &mut self.fc1.weight.data);
        f(format!("{prefix}.fc1.bias"), &mut self.fc1.bias.data);
        if let Some(bn) = &mut self.bn {
            f(format!("{prefix}.bn.gamma"), &mut bn.gamma.data);
            f(format!("{prefix}.bn.beta"), &mut bn.beta.data);
            f(format!("{prefix}.bn.running_mean"), &mut bn.running_mean);
            f(format!("{prefix}.bn.running_var"), &mut bn.running_var);
        }
        f(format!("{prefix}.fc2.weight"), &mut self.fc2.weight.data);
        f(format!("{prefix}.fc2.bias"), &mut self.fc2.bias.data);
    }
}
