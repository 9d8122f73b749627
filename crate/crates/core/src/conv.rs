//! Standard, depthwise, pointwise and depthwise-separable 2-D convolutions
//! plus max pooling.
//!
//! Every operation accepts a single channels-last feature map `[H, W, C]` or
//! a batch `[B, H, W, C]`. The fast paths flatten input patches into rows and
//! run a matrix product; [`naive_conv_oracle`] is a direct loop translation
//! kept as the reference the fast paths are tested against.
//!
//! Batches are processed in fixed chunks of [`CHUNK`] items, in parallel
//! across chunks. Weight gradients are summed chunk by chunk in index order,
//! so results are bitwise identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

const CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    Standard,
    Depthwise,
    Pointwise,
    Separable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: Padding,
    pub mode: ConvMode,
}

impl ConvSpec {
    pub fn new(mode: ConvMode, kernel_size: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        let spec = ConvSpec { kernel_size, in_channels, out_channels, stride: 1, padding: Padding::Same, mode };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        self.stride = stride;
        self.validate()?;
        Ok(self)
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::Contract(format!("conv spec fields must be positive: {self:?}")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Contract(format!("even kernel size {} is not supported", self.kernel_size)));
        }
        if self.mode == ConvMode::Pointwise && self.kernel_size != 1 {
            return Err(Error::Contract("pointwise convolution requires a 1x1 kernel".into()));
        }
        if self.mode == ConvMode::Depthwise && self.out_channels != self.in_channels {
            return Err(Error::Contract("depthwise convolution must keep the channel count".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry { kernel: self.kernel_size, stride: self.stride, padding: self.padding }
    }
}

/// Spatial part of a convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Geometry {
    /// Zero padding placed before the first row/column.
    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.kernel / 2,
            Padding::Valid => 0,
        }
    }

    pub fn out_extent(&self, input: usize) -> Result<usize> {
        match self.padding {
            Padding::Same => Ok((input - 1) / self.stride + 1),
            Padding::Valid => {
                if self.kernel > input {
                    return Err(Error::Geometry(format!(
                        "kernel {} larger than input extent {input} with valid padding",
                        self.kernel
                    )));
                }
                Ok((input - self.kernel) / self.stride + 1)
            }
        }
    }
}

/// Trained or initialised weights for one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvWeights {
    /// `kernel` is `[D_K, D_K, M, N]`.
    Standard { kernel: Tensor, bias: Option<Tensor> },
    /// `kernel` is `[D_K, D_K, M]`.
    Depthwise { kernel: Tensor, bias: Option<Tensor> },
    /// `kernel` is `[1, 1, M, N]`.
    Pointwise { kernel: Tensor, bias: Option<Tensor> },
    /// Depthwise `[D_K, D_K, M]` followed by pointwise `[1, 1, M, N]`.
    Separable { depthwise: Tensor, depthwise_bias: Option<Tensor>, pointwise: Tensor, bias: Option<Tensor> },
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Shape(format!("{what} must be {shape:?}, got {:?}", t.shape())));
    }
    Ok(())
}

impl ConvWeights {
    pub fn validate(&self, spec: &ConvSpec) -> Result<()> {
        spec.validate()?;
        let (k, m, n) = (spec.kernel_size, spec.in_channels, spec.out_channels);
        let check_bias = |b: &Option<Tensor>, len: usize| match b {
            Some(b) => expect_shape(b, &[len], "bias"),
            None => Ok(()),
        };
        match (self, spec.mode) {
            (ConvWeights::Standard { kernel, bias }, ConvMode::Standard) => {
                expect_shape(kernel, &[k, k, m, n], "kernel")?;
                check_bias(bias, n)
            }
            (ConvWeights::Depthwise { kernel, bias }, ConvMode::Depthwise) => {
                expect_shape(kernel, &[k, k, m], "depthwise kernel")?;
                check_bias(bias, m)
            }
            (ConvWeights::Pointwise { kernel, bias }, ConvMode::Pointwise) => {
                expect_shape(kernel, &[1, 1, m, n], "pointwise kernel")?;
                check_bias(bias, n)
            }
            (ConvWeights::Separable { depthwise, depthwise_bias, pointwise, bias }, ConvMode::Separable) => {
                expect_shape(depthwise, &[k, k, m], "depthwise kernel")?;
                expect_shape(pointwise, &[1, 1, m, n], "pointwise kernel")?;
                check_bias(depthwise_bias, m)?;
                check_bias(bias, n)
            }
            (_, mode) => Err(Error::Contract(format!("weights do not match conv mode {mode:?}"))),
        }
    }
}

/// Batched view of an input: `(batch, height, width, channels, was_single)`.
fn batch_dims(x: &Tensor) -> Result<(usize, usize, usize, usize, bool)> {
    match *x.shape() {
        [h, w, c] => Ok((1, h, w, c, true)),
        [b, h, w, c] => Ok((b, h, w, c, false)),
        _ => Err(Error::Shape(format!("expected [H,W,C] or [B,H,W,C], got {:?}", x.shape()))),
    }
}

fn finish(data: Vec<f64>, b: usize, h: usize, w: usize, c: usize, single: bool) -> Tensor {
    let shape: Vec<usize> = if single { vec![h, w, c] } else { vec![b, h, w, c] };
    Tensor::new(&shape, data).expect("conv output shape is consistent")
}

fn chunks(batch: usize) -> Vec<std::ops::Range<usize>> {
    (0..batch).step_by(CHUNK).map(|s| s..(s + CHUNK).min(batch)).collect()
}

/// Copies the receptive field of every output pixel into one row of `cols`
/// (`[Ho*Wo, D_K*D_K*C]`, column order `(i, j, c)`), zero outside the input.
#[allow(clippy::too_many_arguments)]
fn im2col(img: &[f64], h: usize, w: usize, c: usize, g: &Geometry, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let pad = g.pad() as isize;
    let row_len = k * k * c;
    cols.fill(0.0);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * row_len..][..row_len];
            for i in 0..k {
                let y = (oy * g.stride) as isize + i as isize - pad;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let x = (ox * g.stride) as isize + j as isize - pad;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let src = (y as usize * w + x as usize) * c;
                    row[(i * k + j) * c..][..c].copy_from_slice(&img[src..src + c]);
                }
            }
        }
    }
}

/// Scatter-adds patch rows back onto the image they were taken from.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], h: usize, w: usize, c: usize, g: &Geometry, ho: usize, wo: usize, img: &mut [f64]) {
    let k = g.kernel;
    let pad = g.pad() as isize;
    let row_len = k * k * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * row_len..][..row_len];
            for i in 0..k {
                let y = (oy * g.stride) as isize + i as isize - pad;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let x = (ox * g.stride) as isize + j as isize - pad;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let dst = (y as usize * w + x as usize) * c;
                    for (d, s) in img[dst..dst + c].iter_mut().zip(&row[(i * k + j) * c..][..c]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn check_kernel_fits(g: &Geometry, h: usize, w: usize) -> Result<(usize, usize)> {
    Ok((g.out_extent(h)?, g.out_extent(w)?))
}

/// Standard convolution on a batch. `kernel` is `[D_K, D_K, M, N]`.
pub fn standard_forward(x: &Tensor, kernel: &Tensor, g: &Geometry) -> Result<Tensor> {
    let (b, h, w, m, single) = batch_dims(x)?;
    let n = match *kernel.shape() {
        [k1, k2, km, n] if k1 == g.kernel && k2 == g.kernel && km == m => n,
        _ => {
            return Err(Error::Shape(format!(
                "kernel {:?} incompatible with input channels {m} and kernel size {}",
                kernel.shape(),
                g.kernel
            )))
        }
    };
    let (ho, wo) = check_kernel_fits(g, h, w)?;
    let (in_sz, out_sz, row_len) = (h * w * m, ho * wo * n, g.kernel * g.kernel * m);
    let parts: Vec<Vec<f64>> = chunks(b)
        .into_par_iter()
        .map(|r| {
            let mut out = vec![0.0; r.len() * out_sz];
            let mut cols = vec![0.0; ho * wo * row_len];
            for (t, item) in r.enumerate() {
                im2col(&x.data()[item * in_sz..][..in_sz], h, w, m, g, ho, wo, &mut cols);
                gemm(&cols, kernel.data(), &mut out[t * out_sz..][..out_sz], ho * wo, row_len, n);
            }
            out
        })
        .collect();
    Ok(finish(parts.concat(), b, ho, wo, n, single))
}

/// Gradients of a standard convolution: `(d_input, d_kernel)`.
/// `d_input` is skipped when `need_input` is false.
pub fn standard_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &Geometry,
    dy: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor) {
    let (b, h, w, m, _) = batch_dims(x).expect("validated in forward");
    let n = kernel.shape()[3];
    let (ho, wo) = (g.out_extent(h).unwrap(), g.out_extent(w).unwrap());
    let (in_sz, out_sz, row_len) = (h * w * m, ho * wo * n, g.kernel * g.kernel * m);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = chunks(b)
        .into_par_iter()
        .map(|r| {
            let mut dk = vec![0.0; row_len * n];
            let mut dx = if need_input { vec![0.0; r.len() * in_sz] } else { Vec::new() };
            let mut cols = vec![0.0; ho * wo * row_len];
            let mut dcols = vec![0.0; ho * wo * row_len];
            for (t, item) in r.enumerate() {
                let dyi = &dy.data()[item * out_sz..][..out_sz];
                im2col(&x.data()[item * in_sz..][..in_sz], h, w, m, g, ho, wo, &mut cols);
                gemm_tn(&cols, dyi, &mut dk, ho * wo, row_len, n);
                if need_input {
                    dcols.fill(0.0);
                    gemm_nt(dyi, kernel.data(), &mut dcols, ho * wo, n, row_len);
                    col2im(&dcols, h, w, m, g, ho, wo, &mut dx[t * in_sz..][..in_sz]);
                }
            }
            (dk, dx)
        })
        .collect();
    let mut dk = vec![0.0; row_len * n];
    let mut dx = Vec::with_capacity(if need_input { b * in_sz } else { 0 });
    for (pk, px) in parts {
        for (a, v) in dk.iter_mut().zip(&pk) {
            *a += v;
        }
        dx.extend(px);
    }
    let dk = Tensor::new(kernel.shape(), dk).unwrap();
    let dx = need_input.then(|| Tensor::new(x.shape(), dx).unwrap());
    (dx, dk)
}

/// Depthwise convolution on a batch. `kernel` is `[D_K, D_K, M]`.
pub fn depthwise_forward(x: &Tensor, kernel: &Tensor, g: &Geometry) -> Result<Tensor> {
    let (b, h, w, m, single) = batch_dims(x)?;
    if kernel.shape() != [g.kernel, g.kernel, m] {
        return Err(Error::Shape(format!(
            "depthwise kernel {:?} incompatible with input channels {m} and kernel size {}",
            kernel.shape(),
            g.kernel
        )));
    }
    let (ho, wo) = check_kernel_fits(g, h, w)?;
    let taps = g.kernel * g.kernel;
    let (in_sz, out_sz) = (h * w * m, ho * wo * m);
    let kd = kernel.data();
    let parts: Vec<Vec<f64>> = chunks(b)
        .into_par_iter()
        .map(|r| {
            let mut out = vec![0.0; r.len() * out_sz];
            let mut cols = vec![0.0; ho * wo * taps * m];
            for (t, item) in r.enumerate() {
                im2col(&x.data()[item * in_sz..][..in_sz], h, w, m, g, ho, wo, &mut cols);
                let o = &mut out[t * out_sz..][..out_sz];
                for p in 0..ho * wo {
                    let row = &cols[p * taps * m..][..taps * m];
                    let dst = &mut o[p * m..][..m];
                    for tap in 0..taps {
                        let xs = &row[tap * m..][..m];
                        let ks = &kd[tap * m..][..m];
                        for ((d, xv), kv) in dst.iter_mut().zip(xs).zip(ks) {
                            *d += xv * kv;
                        }
                    }
                }
            }
            out
        })
        .collect();
    Ok(finish(parts.concat(), b, ho, wo, m, single))
}

pub fn depthwise_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &Geometry,
    dy: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor) {
    let (b, h, w, m, _) = batch_dims(x).expect("validated in forward");
    let (ho, wo) = (g.out_extent(h).unwrap(), g.out_extent(w).unwrap());
    let taps = g.kernel * g.kernel;
    let (in_sz, out_sz) = (h * w * m, ho * wo * m);
    let kd = kernel.data();
    let parts: Vec<(Vec<f64>, Vec<f64>)> = chunks(b)
        .into_par_iter()
        .map(|r| {
            let mut dk = vec![0.0; taps * m];
            let mut dx = if need_input { vec![0.0; r.len() * in_sz] } else { Vec::new() };
            let mut cols = vec![0.0; ho * wo * taps * m];
            let mut dcols = vec![0.0; ho * wo * taps * m];
            for (t, item) in r.enumerate() {
                let dyi = &dy.data()[item * out_sz..][..out_sz];
                im2col(&x.data()[item * in_sz..][..in_sz], h, w, m, g, ho, wo, &mut cols);
                for p in 0..ho * wo {
                    let gy = &dyi[p * m..][..m];
                    for tap in 0..taps {
                        let off = p * taps * m + tap * m;
                        for c in 0..m {
                            dk[tap * m + c] += cols[off + c] * gy[c];
                            if need_input {
                                dcols[off + c] = kd[tap * m + c] * gy[c];
                            }
                        }
                    }
                }
                if need_input {
                    col2im(&dcols, h, w, m, g, ho, wo, &mut dx[t * in_sz..][..in_sz]);
                }
            }
            (dk, dx)
        })
        .collect();
    let mut dk = vec![0.0; taps * m];
    let mut dx = Vec::with_capacity(if need_input { b * in_sz } else { 0 });
    for (pk, px) in parts {
        for (a, v) in dk.iter_mut().zip(&pk) {
            *a += v;
        }
        dx.extend(px);
    }
    let dk = Tensor::new(kernel.shape(), dk).unwrap();
    let dx = need_input.then(|| Tensor::new(x.shape(), dx).unwrap());
    (dx, dk)
}

/// Max pooling forward. Returns the pooled tensor and, per output element,
/// the flat input index of the winning tap (first maximum in scan order).
pub fn maxpool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (b, h, w, c, single) = batch_dims(x)?;
    if window == 0 || stride == 0 {
        return Err(Error::Contract("pooling window and stride must be positive".into()));
    }
    if window > h || window > w {
        return Err(Error::Geometry(format!("pool window {window} larger than input {h}x{w}")));
    }
    let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::with_capacity(b * ho * wo * c);
    let mut arg = Vec::with_capacity(b * ho * wo * c);
    let xd = x.data();
    for item in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for i in 0..window {
                        for j in 0..window {
                            let at = ((item * h + oy * stride + i) * w + ox * stride + j) * c + ch;
                            if xd[at] > best {
                                best = xd[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_at);
                }
            }
        }
    }
    Ok((finish(out, b, ho, wo, c, single), arg))
}

/// `[.., C] + bias[C]` broadcast over every leading position.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if bias.shape() != [c] {
        return Err(Error::Shape(format!("bias {:?} does not match {c} channels", bias.shape())));
    }
    let mut out = x.clone();
    for px in out.data_mut().chunks_mut(c) {
        for (v, b) in px.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Standard convolution `G = K * F` following the `ConvSpec` geometry.
pub fn conv2d_standard(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let (_, _, _, m, _) = batch_dims(input)?;
    if m != spec.in_channels || kernel.shape() != [spec.kernel_size, spec.kernel_size, m, spec.out_channels] {
        return Err(Error::Shape(format!("input channels {m} / kernel {:?} do not match {spec:?}", kernel.shape())));
    }
    standard_forward(input, kernel, &spec.geometry())
}

/// Per-channel spatial filtering; output channel `m` sees only input channel `m`.
pub fn conv2d_depthwise(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let (_, _, _, m, _) = batch_dims(input)?;
    if m != spec.in_channels {
        return Err(Error::Shape(format!("input has {m} channels, spec expects {}", spec.in_channels)));
    }
    depthwise_forward(input, kernel, &spec.geometry())
}

/// 1x1 convolution mixing channels at every pixel. `kernel` is `[1, 1, M, N]`.
pub fn conv2d_pointwise(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if kernel.rank() != 4 || kernel.shape()[0] != 1 || kernel.shape()[1] != 1 {
        return Err(Error::Contract(format!("pointwise kernel must be 1x1xMxN, got {:?}", kernel.shape())));
    }
    let g = Geometry { kernel: 1, stride: 1, padding: Padding::Same };
    standard_forward(input, kernel, &g)
}

/// Depthwise stage then pointwise stage; `bias` is added after the pointwise stage.
pub fn depthwise_separable(
    input: &Tensor,
    depthwise: &Tensor,
    pointwise: &Tensor,
    spec: &ConvSpec,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let dw_spec = ConvSpec { mode: ConvMode::Depthwise, out_channels: spec.in_channels, ..*spec };
    let mid = conv2d_depthwise(input, depthwise, &dw_spec)?;
    let out = conv2d_pointwise(&mid, pointwise)?;
    if pointwise.shape()[3] != spec.out_channels {
        return Err(Error::Shape(format!("pointwise kernel {:?} does not match {spec:?}", pointwise.shape())));
    }
    match bias {
        Some(b) => add_channel_bias(&out, b),
        None => Ok(out),
    }
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    maxpool_forward(input, window, stride).map(|(t, _)| t)
}

/// Applies a full conv layer (any mode, biases included) via the fast paths.
pub fn conv_layer_forward(input: &Tensor, weights: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    weights.validate(spec)?;
    let with_bias = |t: Tensor, b: &Option<Tensor>| match b {
        Some(b) => add_channel_bias(&t, b),
        None => Ok(t),
    };
    match weights {
        ConvWeights::Standard { kernel, bias } => with_bias(conv2d_standard(input, kernel, spec)?, bias),
        ConvWeights::Depthwise { kernel, bias } => with_bias(conv2d_depthwise(input, kernel, spec)?, bias),
        ConvWeights::Pointwise { kernel, bias } => with_bias(conv2d_standard(input, kernel, spec)?, bias),
        ConvWeights::Separable { depthwise, depthwise_bias, pointwise, bias } => {
            let dw_spec = ConvSpec { mode: ConvMode::Depthwise, out_channels: spec.in_channels, ..*spec };
            let mid = with_bias(conv2d_depthwise(input, depthwise, &dw_spec)?, depthwise_bias)?;
            with_bias(conv2d_pointwise(&mid, pointwise)?, bias)
        }
    }
}

/// Reference convolution: a direct loop over output pixels, channels and taps
/// with no patch flattening.
pub fn naive_conv_oracle(input: &Tensor, weights: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    weights.validate(spec)?;
    let (b, h, w, m, single) = batch_dims(input)?;
    if m != spec.in_channels {
        return Err(Error::Shape(format!("input has {m} channels, spec expects {}", spec.in_channels)));
    }
    let g = spec.geometry();
    let (ho, wo) = check_kernel_fits(&g, h, w)?;
    let x = |item: usize, y: isize, xx: isize, c: usize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            input.data()[((item * h + y as usize) * w + xx as usize) * m + c]
        }
    };
    let pad = g.pad() as isize;
    let origin = |o: usize| (o * g.stride) as isize - pad;
    let k = spec.kernel_size;

    let depthwise_naive = |kernel: &Tensor, bias: &Option<Tensor>| -> Vec<f64> {
        let mut out = vec![0.0; b * ho * wo * m];
        for item in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for c in 0..m {
                        let mut acc = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                acc += kernel.get(&[i, j, c])
                                    * x(item, origin(oy) + i as isize, origin(ox) + j as isize, c);
                            }
                        }
                        if let Some(bv) = bias {
                            acc += bv.data()[c];
                        }
                        out[((item * ho + oy) * wo + ox) * m + c] = acc;
                    }
                }
            }
        }
        out
    };
    let pointwise_naive = |src: &[f64], kernel: &Tensor, bias: &Option<Tensor>, n: usize| -> Vec<f64> {
        let pixels = b * ho * wo;
        let mut out = vec![0.0; pixels * n];
        for p in 0..pixels {
            for o in 0..n {
                let mut acc = 0.0;
                for c in 0..m {
                    acc += kernel.get(&[0, 0, c, o]) * src[p * m + c];
                }
                if let Some(bv) = bias {
                    acc += bv.data()[o];
                }
                out[p * n + o] = acc;
            }
        }
        out
    };

    let n = spec.out_channels;
    let data = match weights {
        ConvWeights::Standard { kernel, bias } | ConvWeights::Pointwise { kernel, bias } => {
            let mut out = vec![0.0; b * ho * wo * n];
            for item in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        for o in 0..n {
                            let mut acc = 0.0;
                            for i in 0..k {
                                for j in 0..k {
                                    for c in 0..m {
                                        acc += kernel.get(&[i, j, c, o])
                                            * x(item, origin(oy) + i as isize, origin(ox) + j as isize, c);
                                    }
                                }
                            }
                            if let Some(bv) = bias {
                                acc += bv.data()[o];
                            }
                            out[((item * ho + oy) * wo + ox) * n + o] = acc;
                        }
                    }
                }
            }
            out
        }
        ConvWeights::Depthwise { kernel, bias } => depthwise_naive(kernel, bias),
        ConvWeights::Separable { depthwise, depthwise_bias, pointwise, bias } => {
            let mid = depthwise_naive(depthwise, depthwise_bias);
            pointwise_naive(&mid, pointwise, bias, n)
        }
    };
    let out_c = if spec.mode == ConvMode::Depthwise { m } else { n };
    Ok(finish(data, b, ho, wo, out_c, single))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::random_uniform(shape, seed, -1.0, 1.0).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let f = rand(&[5, 4, 1], 1);
        let spec = ConvSpec::new(ConvMode::Standard, 1, 1, 1).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0).unwrap();
        assert_eq!(conv2d_standard(&f, &k, &spec).unwrap(), f);
    }

    #[test]
    fn all_ones_three_by_three() {
        let f = Tensor::full(&[3, 3, 1], 1.0).unwrap();
        let k = Tensor::full(&[3, 3, 1, 1], 1.0).unwrap();
        let spec = ConvSpec::new(ConvMode::Standard, 3, 1, 1).unwrap();
        let expected = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(conv2d_standard(&f, &k, &spec).unwrap().data(), &expected);
        let oracle = naive_conv_oracle(&f, &ConvWeights::Standard { kernel: k, bias: None }, &spec).unwrap();
        assert_eq!(oracle.data(), &expected);
    }

    #[test]
    fn same_padding_keeps_extent() {
        for k in [1, 3, 5, 7, 9] {
            let f = rand(&[11, 11, 2], k as u64);
            let spec = ConvSpec::new(ConvMode::Standard, k, 2, 3).unwrap();
            let out = conv2d_standard(&f, &rand(&[k, k, 2, 3], 9), &spec).unwrap();
            assert_eq!(out.shape(), &[11, 11, 3]);
        }
    }

    #[test]
    fn valid_padding_geometry() {
        let f = rand(&[7, 7, 1], 2);
        let spec =
            ConvSpec::new(ConvMode::Standard, 3, 1, 1).unwrap().with_padding(Padding::Valid).with_stride(2).unwrap();
        let out = conv2d_standard(&f, &rand(&[3, 3, 1, 1], 3), &spec).unwrap();
        assert_eq!(out.shape(), &[3, 3, 1]);
        let big = ConvSpec::new(ConvMode::Standard, 9, 1, 1).unwrap().with_padding(Padding::Valid);
        assert!(matches!(conv2d_standard(&f, &rand(&[9, 9, 1, 1], 3), &big), Err(Error::Geometry(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(ConvSpec::new(ConvMode::Standard, 4, 1, 1), Err(Error::Contract(_))));
        assert!(matches!(ConvSpec::new(ConvMode::Pointwise, 3, 2, 2), Err(Error::Contract(_))));
        assert!(matches!(ConvSpec::new(ConvMode::Depthwise, 3, 2, 4), Err(Error::Contract(_))));
        assert!(ConvSpec::new(ConvMode::Standard, 0, 1, 1).is_err());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let spec = ConvSpec::new(ConvMode::Standard, 3, 2, 1).unwrap();
        assert!(matches!(conv2d_standard(&rand(&[4, 4, 3], 1), &rand(&[3, 3, 2, 1], 2), &spec), Err(Error::Shape(_))));
        let dspec = ConvSpec::new(ConvMode::Depthwise, 3, 2, 2).unwrap();
        assert!(matches!(conv2d_depthwise(&rand(&[4, 4, 2], 1), &rand(&[3, 3, 3], 2), &dspec), Err(Error::Shape(_))));
    }

    #[test]
    fn depthwise_single_channel_matches_standard() {
        let f = rand(&[6, 6, 1], 4);
        let k = rand(&[3, 3, 1], 5);
        let dspec = ConvSpec::new(ConvMode::Depthwise, 3, 1, 1).unwrap();
        let sspec = ConvSpec::new(ConvMode::Standard, 3, 1, 1).unwrap();
        let a = conv2d_depthwise(&f, &k, &dspec).unwrap();
        let b = conv2d_standard(&f, &k.reshape(&[3, 3, 1, 1]).unwrap(), &sspec).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn depthwise_channel_independence() {
        let mut f = rand(&[5, 5, 3], 6);
        let k = rand(&[3, 3, 3], 7);
        let spec = ConvSpec::new(ConvMode::Depthwise, 3, 3, 3).unwrap();
        let before = conv2d_depthwise(&f, &k, &spec).unwrap();
        for px in f.data_mut().chunks_mut(3) {
            px[0] = 0.0;
        }
        let after = conv2d_depthwise(&f, &k, &spec).unwrap();
        for (a, b) in before.data().chunks(3).zip(after.data().chunks(3)) {
            assert_eq!(b[0], 0.0);
            assert_eq!(a[1..], b[1..]);
        }
    }

    #[test]
    fn pointwise_cases() {
        let g = rand(&[3, 4, 2], 8);
        let eye = Tensor::identity(2).unwrap().reshape(&[1, 1, 2, 2]).unwrap();
        assert_eq!(conv2d_pointwise(&g, &eye).unwrap(), g);
        let ones = Tensor::full(&[1, 1, 2, 1], 1.0).unwrap();
        let summed = conv2d_pointwise(&g, &ones).unwrap();
        for (s, px) in summed.data().iter().zip(g.data().chunks(2)) {
            assert!((s - (px[0] + px[1])).abs() < 1e-15);
        }
        assert!(matches!(conv2d_pointwise(&g, &rand(&[3, 3, 2, 1], 1)), Err(Error::Contract(_))));
    }

    #[test]
    fn separable_double_identity() {
        let f = rand(&[4, 4, 3], 9);
        let spec = ConvSpec::new(ConvMode::Separable, 1, 3, 3).unwrap();
        let dw = Tensor::full(&[1, 1, 3], 1.0).unwrap();
        let pw = Tensor::identity(3).unwrap().reshape(&[1, 1, 3, 3]).unwrap();
        assert_eq!(depthwise_separable(&f, &dw, &pw, &spec, None).unwrap(), f);
    }

    #[test]
    fn separable_single_channel_is_rank_one_standard() {
        let f = rand(&[6, 6, 1], 10);
        let dw = rand(&[3, 3, 1], 11);
        let pw = Tensor::new(&[1, 1, 1, 1], vec![-0.7]).unwrap();
        let spec = ConvSpec::new(ConvMode::Separable, 3, 1, 1).unwrap();
        let sep = depthwise_separable(&f, &dw, &pw, &spec, None).unwrap();
        let fused = dw.scale(-0.7).reshape(&[3, 3, 1, 1]).unwrap();
        let std = conv2d_standard(&f, &fused, &ConvSpec::new(ConvMode::Standard, 3, 1, 1).unwrap()).unwrap();
        assert!(sep.max_abs_diff(&std) < 1e-14);
    }

    #[test]
    fn maxpool_cases() {
        let c = Tensor::full(&[4, 4, 2], 1.5).unwrap();
        let p = maxpool2d(&c, 2, 2).unwrap();
        assert_eq!(p.shape(), &[2, 2, 2]);
        assert!(p.data().iter().all(|&x| x == 1.5));
        let t = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&t, 2, 2).unwrap().data(), &[4.0]);
        assert!(matches!(maxpool2d(&t, 3, 2), Err(Error::Geometry(_))));
    }

    #[test]
    fn maxpool_matches_brute_force() {
        let t = rand(&[4, 4, 1], 12);
        let p = maxpool2d(&t, 2, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for i in 0..2 {
                    for j in 0..2 {
                        best = best.max(t.get(&[oy * 2 + i, ox * 2 + j, 0]));
                    }
                }
                assert_eq!(p.get(&[oy, ox, 0]), best);
            }
        }
    }

    #[test]
    fn batched_equals_per_item() {
        let f = rand(&[5, 6, 6, 2], 13);
        let k = rand(&[3, 3, 2, 4], 14);
        let spec = ConvSpec::new(ConvMode::Standard, 3, 2, 4).unwrap();
        let all = conv2d_standard(&f, &k, &spec).unwrap();
        for item in 0..5 {
            let single = Tensor::new(&[6, 6, 2], f.data()[item * 72..][..72].to_vec()).unwrap();
            let out = conv2d_standard(&single, &k, &spec).unwrap();
            assert_eq!(out.data(), &all.data()[item * 144..][..144]);
        }
    }
}
