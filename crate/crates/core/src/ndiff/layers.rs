use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Train mode uses batch statistics and stochastic regularizers; eval mode
/// uses running statistics and disables them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One node of a sequential [`Graph`](super::Graph).
#[derive(Clone, Debug)]
pub enum Layer {
    /// `y = x W + b` with `W: in x out`.
    Dense { w: Tensor, b: Tensor },
    /// `W: out_ch x in_ch x k x k`.
    Conv2d {
        w: Tensor,
        b: Tensor,
        stride: usize,
        pad: usize,
    },
    /// Adjoint of [`Layer::Conv2d`]; `W: in_ch x out_ch x k x k`.
    ConvTranspose2d {
        w: Tensor,
        b: Tensor,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    /// 2x2 window, stride 2.
    MaxPool2,
    Relu,
    Tanh,
    Sigmoid,
    /// Per-feature (rank-1 samples) or per-channel (rank-3 samples) normalization.
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        momentum: f64,
        eps: f64,
    },
    /// Reinterprets each sample with a new per-sample shape.
    Reshape { shape: Vec<usize> },
    /// Inverted dropout; identity in eval mode.
    Dropout { rate: f64 },
    /// Additive isotropic Gaussian noise; identity in eval mode.
    GaussianNoise { sigma: f64 },
}

/// Values a layer keeps from the forward pass for its backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Cache {
    None,
    Input(Tensor),
    Cols { cols: Vec<f64>, in_shape: Vec<usize> },
    Output(Tensor),
    PoolArgmax { argmax: Vec<usize>, in_shape: Vec<usize> },
    Norm { xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    Mask(Tensor),
    Shape(Vec<usize>),
}

/// Running-statistics update produced by a train-mode batch-norm forward.
#[derive(Clone, Debug)]
pub(crate) struct StatUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Geometry shared by im2col and col2im.
#[derive(Clone, Copy, Debug)]
struct Patches {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for patch row `(c, ki, kj)` at output position `(oh, ow)`.
    #[inline]
    fn source(&self, ki: usize, kj: usize, oh: usize, ow: usize) -> Option<(usize, usize)> {
        let y = (oh * self.stride + ki).checked_sub(self.pad)?;
        let x = (ow * self.stride + kj).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    /// `[C*k*k, N*OH*OW]` patch matrix of an `N x C x H x W` buffer.
    fn im2col(&self, src: &[f64], batch: usize) -> Vec<f64> {
        let cols_w = batch * self.positions();
        let img = self.channels * self.height * self.width;
        let mut cols = vec![0.0; self.rows() * cols_w];
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                    for n in 0..batch {
                        let plane = &src[n * img + c * self.height * self.width..];
                        for oh in 0..self.out_h {
                            for ow in 0..self.out_w {
                                if let Some((y, x)) = self.source(ki, kj, oh, ow) {
                                    dst[n * self.positions() + oh * self.out_w + ow] =
                                        plane[y * self.width + x];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add of a patch matrix back into an `N x C x H x W` buffer.
    fn col2im(&self, cols: &[f64], batch: usize) -> Vec<f64> {
        let cols_w = batch * self.positions();
        let img = self.channels * self.height * self.width;
        let mut dst = vec![0.0; batch * img];
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let src = &cols[row * cols_w..(row + 1) * cols_w];
                    for n in 0..batch {
                        let plane = &mut dst[n * img + c * self.height * self.width..];
                        for oh in 0..self.out_h {
                            for ow in 0..self.out_w {
                                if let Some((y, x)) = self.source(ki, kj, oh, ow) {
                                    plane[y * self.width + x] +=
                                        src[n * self.positions() + oh * self.out_w + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
        dst
    }
}

/// `N x C x P` (sample-major) to `C x (N*P)` (channel-major).
fn to_channel_major(src: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for n in 0..batch {
        for c in 0..channels {
            let s = &src[(n * channels + c) * plane..][..plane];
            out[c * batch * plane + n * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

fn to_sample_major(src: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for c in 0..channels {
        for n in 0..batch {
            let s = &src[c * batch * plane + n * plane..][..plane];
            out[(n * channels + c) * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

fn expect_rank(in_shape: &[usize], rank: usize, layer: &str) -> Result<()> {
    if in_shape.len() == rank {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{layer} expects rank-{rank} samples, got shape {in_shape:?}"
        )))
    }
}

/// Logistic function, stable for large |v|.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::ConvTranspose2d { .. } => "conv_transpose2d",
            Layer::MaxPool2 => "maxpool2",
            Layer::Relu => "relu",
            Layer::Tanh => "tanh",
            Layer::Sigmoid => "sigmoid",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Reshape { .. } => "reshape",
            Layer::Dropout { .. } => "dropout",
            Layer::GaussianNoise { .. } => "gaussian_noise",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, Layer::Dropout { .. } | Layer::GaussianNoise { .. })
    }

    /// Per-sample output shape, validating the per-sample input shape.
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { w, .. } => {
                expect_rank(in_shape, 1, "dense")?;
                if in_shape[0] != w.shape()[0] {
                    return Err(Error::shape("dense input", &w.shape()[..1], in_shape));
                }
                Ok(vec![w.shape()[1]])
            }
            Layer::Conv2d { w, stride, pad, .. } => {
                expect_rank(in_shape, 3, "conv2d")?;
                let s = w.shape();
                if in_shape[0] != s[1] {
                    return Err(Error::shape("conv2d channels", &s[1..2], &in_shape[..1]));
                }
                let oh = conv_out(in_shape[1], s[2], *stride, *pad);
                let ow = conv_out(in_shape[2], s[3], *stride, *pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![s[0], oh, ow]),
                    _ => Err(Error::invalid(format!("conv2d kernel larger than input {in_shape:?}"))),
                }
            }
            Layer::ConvTranspose2d {
                w,
                stride,
                pad,
                out_pad,
                ..
            } => {
                expect_rank(in_shape, 3, "conv_transpose2d")?;
                let s = w.shape();
                if in_shape[0] != s[0] {
                    return Err(Error::shape("conv_transpose2d channels", &s[..1], &in_shape[..1]));
                }
                if out_pad >= stride {
                    return Err(Error::invalid("conv_transpose2d output padding must be < stride"));
                }
                let grow = |n: usize| ((n - 1) * stride + s[2] + out_pad).checked_sub(2 * pad);
                match (grow(in_shape[1]), grow(in_shape[2])) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![s[1], oh, ow]),
                    _ => Err(Error::invalid("conv_transpose2d padding exceeds output")),
                }
            }
            Layer::MaxPool2 => {
                expect_rank(in_shape, 3, "maxpool2")?;
                if in_shape[1] < 2 || in_shape[2] < 2 {
                    return Err(Error::invalid(format!("maxpool2 on {in_shape:?}")));
                }
                Ok(vec![in_shape[0], in_shape[1] / 2, in_shape[2] / 2])
            }
            Layer::BatchNorm { gamma, .. } => {
                if in_shape.len() != 1 && in_shape.len() != 3 {
                    return Err(Error::invalid("batchnorm expects rank-1 or rank-3 samples"));
                }
                if in_shape[0] != gamma.len() {
                    return Err(Error::shape("batchnorm features", gamma.shape(), &in_shape[..1]));
                }
                Ok(in_shape.to_vec())
            }
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != in_shape.iter().product::<usize>() {
                    return Err(Error::shape("reshape", shape, in_shape));
                }
                Ok(shape.clone())
            }
            Layer::Relu
            | Layer::Tanh
            | Layer::Sigmoid
            | Layer::Dropout { .. }
            | Layer::GaussianNoise { .. } => Ok(in_shape.to_vec()),
        }
    }

    /// Names of learnable tensors, in the order `backward` returns their gradients.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::ConvTranspose2d { .. } => &["w", "b"],
            Layer::BatchNorm { .. } => &["gamma", "beta"],
            _ => &[],
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } | Layer::ConvTranspose2d { w, b, .. } => {
                vec![w, b]
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } | Layer::ConvTranspose2d { w, b, .. } => {
                vec![w, b]
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    /// Non-learnable persistent tensors (batch-norm running statistics).
    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } => vec![("running_mean", running_mean), ("running_var", running_var)],
            _ => Vec::new(),
        }
    }

    /// Parameters followed by buffers, with their slot names.
    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } | Layer::ConvTranspose2d { w, b, .. } => {
                vec![("w", w), ("b", b)]
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } => vec![("running_mean", running_mean), ("running_var", running_var)],
            _ => Vec::new(),
        }
    }

    pub(crate) fn apply_stat_update(&mut self, update: &StatUpdate) {
        if let Layer::BatchNorm {
            running_mean,
            running_var,
            momentum,
            ..
        } = self
        {
            for (r, m) in running_mean.data_mut().iter_mut().zip(&update.mean) {
                *r = (1.0 - *momentum) * *r + *momentum * m;
            }
            for (r, v) in running_var.data_mut().iter_mut().zip(&update.var) {
                *r = (1.0 - *momentum) * *r + *momentum * v;
            }
        }
    }

    /// Forward pass over a batch. `rng` is required only by stochastic layers in train mode.
    pub(crate) fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Cache, Option<StatUpdate>)> {
        let batch = x.batch();
        let out_sample = self.out_shape(&x.shape()[1..])?;
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&out_sample);
        match self {
            Layer::Dense { w, b } => {
                let (fin, fout) = (w.shape()[0], w.shape()[1]);
                let mut y = Vec::with_capacity(batch * fout);
                for _ in 0..batch {
                    y.extend_from_slice(b.data());
                }
                gemm(batch, fin, fout, 1.0, x.data(), false, w.data(), false, 1.0, &mut y);
                Ok((Tensor::new(out_shape, y)?, Cache::Input(x.clone()), None))
            }
            Layer::Conv2d { w, b, .. } => {
                let geo = self.conv_patches(x.shape())?;
                let cols = geo.im2col(x.data(), batch);
                let cout = w.shape()[0];
                let mut y = vec![0.0; cout * batch * geo.positions()];
                gemm(
                    cout,
                    geo.rows(),
                    batch * geo.positions(),
                    1.0,
                    w.data(),
                    false,
                    &cols,
                    false,
                    0.0,
                    &mut y,
                );
                let mut y = to_sample_major(&y, batch, cout, geo.positions());
                add_channel_bias(&mut y, b.data(), geo.positions());
                let cache = Cache::Cols {
                    cols,
                    in_shape: x.shape().to_vec(),
                };
                Ok((Tensor::new(out_shape, y)?, cache, None))
            }
            Layer::ConvTranspose2d { w, b, .. } => {
                let geo = self.transpose_patches(x.shape(), &out_sample)?;
                let cin = w.shape()[0];
                let plane_in = x.shape()[2] * x.shape()[3];
                let xm = to_channel_major(x.data(), batch, cin, plane_in);
                let mut cols = vec![0.0; geo.rows() * batch * plane_in];
                gemm(
                    geo.rows(),
                    cin,
                    batch * plane_in,
                    1.0,
                    w.data(),
                    true,
                    &xm,
                    false,
                    0.0,
                    &mut cols,
                );
                let mut y = geo.col2im(&cols, batch);
                add_channel_bias(&mut y, b.data(), out_sample[1] * out_sample[2]);
                Ok((Tensor::new(out_shape, y)?, Cache::Input(x.clone()), None))
            }
            Layer::MaxPool2 => {
                let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (h / 2, wd / 2);
                let mut y = Vec::with_capacity(batch * c * oh * ow);
                let mut argmax = Vec::with_capacity(y.capacity());
                for plane in 0..batch * c {
                    let base = plane * h * wd;
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best = base + 2 * i * wd + 2 * j;
                            for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * i + di) * wd + 2 * j + dj;
                                if x.data()[idx] > x.data()[best] {
                                    best = idx;
                                }
                            }
                            y.push(x.data()[best]);
                            argmax.push(best);
                        }
                    }
                }
                let cache = Cache::PoolArgmax {
                    argmax,
                    in_shape: x.shape().to_vec(),
                };
                Ok((Tensor::new(out_shape, y)?, cache, None))
            }
            Layer::Relu => {
                let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
                Ok((y.clone(), Cache::Output(y), None))
            }
            Layer::Tanh => {
                let y = x.map(f64::tanh);
                Ok((y.clone(), Cache::Output(y), None))
            }
            Layer::Sigmoid => {
                let y = x.map(sigmoid);
                Ok((y.clone(), Cache::Output(y), None))
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                ..
            } => {
                let features = gamma.len();
                let plane = x.row_len() / features;
                let count = batch * plane;
                let (mean, var, update) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; features];
                        let mut var = vec![0.0; features];
                        for_each_feature(x.data(), batch, features, plane, |f, v| mean[f] += v);
                        mean.iter_mut().for_each(|m| *m /= count as f64);
                        for_each_feature(x.data(), batch, features, plane, |f, v| {
                            var[f] += (v - mean[f]).powi(2)
                        });
                        var.iter_mut().for_each(|s| *s /= count as f64);
                        let unbiased = if count > 1 {
                            var.iter().map(|s| s * count as f64 / (count - 1) as f64).collect()
                        } else {
                            var.clone()
                        };
                        let update = StatUpdate {
                            mean: mean.clone(),
                            var: unbiased,
                        };
                        (mean, var, Some(update))
                    }
                    Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec(), None),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = x.clone();
                let mut y = x.clone();
                for n in 0..batch {
                    for f in 0..features {
                        let off = (n * features + f) * plane;
                        for p in 0..plane {
                            let h = (x.data()[off + p] - mean[f]) * inv_std[f];
                            xhat.data_mut()[off + p] = h;
                            y.data_mut()[off + p] = gamma.data()[f] * h + beta.data()[f];
                        }
                    }
                }
                let cache = Cache::Norm {
                    xhat,
                    inv_std,
                    batch_stats: mode == Mode::Train,
                };
                Ok((y, cache, update))
            }
            Layer::Reshape { .. } => Ok((x.clone().reshape(&out_shape)?, Cache::Shape(x.shape().to_vec()), None)),
            Layer::Dropout { rate } => match mode {
                Mode::Eval => Ok((x.clone(), Cache::None, None)),
                Mode::Train => {
                    let rng = rng.ok_or_else(|| Error::invalid("dropout needs an rng in train mode"))?;
                    let keep = 1.0 - rate;
                    let mask = Tensor::from_fn(x.shape(), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let y = x.zip_map(&mask, |a, m| a * m)?;
                    Ok((y, Cache::Mask(mask), None))
                }
            },
            Layer::GaussianNoise { sigma } => match mode {
                Mode::Eval => Ok((x.clone(), Cache::None, None)),
                Mode::Train => {
                    let rng = rng.ok_or_else(|| Error::invalid("noise layer needs an rng in train mode"))?;
                    let mut y = x.clone();
                    for v in y.data_mut() {
                        let e: f64 = StandardNormal.sample(rng);
                        *v += sigma * e;
                    }
                    Ok((y, Cache::None, None))
                }
            },
        }
    }

    /// Returns `(dx, param grads)`; `dx` is skipped (None) when `want_input` is false.
    pub(crate) fn backward(
        &self,
        cache: &Cache,
        dy: &Tensor,
        want_input: bool,
    ) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        let batch = dy.batch();
        match (self, cache) {
            (Layer::Dense { w, .. }, Cache::Input(x)) => {
                let (fin, fout) = (w.shape()[0], w.shape()[1]);
                let mut dw = vec![0.0; fin * fout];
                gemm(fin, batch, fout, 1.0, x.data(), true, dy.data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; fout];
                for n in 0..batch {
                    db.iter_mut().zip(dy.row(n)).for_each(|(a, b)| *a += b);
                }
                let dx = want_input
                    .then(|| {
                        let mut dx = vec![0.0; batch * fin];
                        gemm(batch, fout, fin, 1.0, dy.data(), false, w.data(), true, 0.0, &mut dx);
                        Tensor::new(x.shape().to_vec(), dx)
                    })
                    .transpose()?;
                Ok((dx, vec![Tensor::new(w.shape().to_vec(), dw)?, Tensor::new(vec![fout], db)?]))
            }
            (Layer::Conv2d { w, .. }, Cache::Cols { cols, in_shape }) => {
                let geo = self.conv_patches(in_shape)?;
                let cout = w.shape()[0];
                let dym = to_channel_major(dy.data(), batch, cout, geo.positions());
                let cols_w = batch * geo.positions();
                let mut dw = vec![0.0; w.len()];
                gemm(cout, cols_w, geo.rows(), 1.0, &dym, false, cols, true, 0.0, &mut dw);
                let db = channel_sums(dy.data(), batch, cout, geo.positions());
                let dx = want_input
                    .then(|| {
                        let mut dcols = vec![0.0; geo.rows() * cols_w];
                        gemm(geo.rows(), cout, cols_w, 1.0, w.data(), true, &dym, false, 0.0, &mut dcols);
                        Tensor::new(in_shape.clone(), geo.col2im(&dcols, batch))
                    })
                    .transpose()?;
                Ok((dx, vec![Tensor::new(w.shape().to_vec(), dw)?, Tensor::new(vec![cout], db)?]))
            }
            (Layer::ConvTranspose2d { w, .. }, Cache::Input(x)) => {
                let geo = self.transpose_patches(x.shape(), &dy.shape()[1..])?;
                let cin = w.shape()[0];
                let cout = w.shape()[1];
                let plane_in = x.shape()[2] * x.shape()[3];
                let dcols = geo.im2col(dy.data(), batch);
                let xm = to_channel_major(x.data(), batch, cin, plane_in);
                let mut dw = vec![0.0; w.len()];
                gemm(cin, batch * plane_in, geo.rows(), 1.0, &xm, false, &dcols, true, 0.0, &mut dw);
                let db = channel_sums(dy.data(), batch, cout, dy.shape()[2] * dy.shape()[3]);
                let dx = want_input
                    .then(|| {
                        let mut dxm = vec![0.0; cin * batch * plane_in];
                        gemm(cin, geo.rows(), batch * plane_in, 1.0, w.data(), false, &dcols, false, 0.0, &mut dxm);
                        Tensor::new(x.shape().to_vec(), to_sample_major(&dxm, batch, cin, plane_in))
                    })
                    .transpose()?;
                Ok((dx, vec![Tensor::new(w.shape().to_vec(), dw)?, Tensor::new(vec![cout], db)?]))
            }
            (Layer::MaxPool2, Cache::PoolArgmax { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(in_shape);
                for (g, &idx) in dy.data().iter().zip(argmax) {
                    dx.data_mut()[idx] += g;
                }
                Ok((Some(dx), Vec::new()))
            }
            (Layer::Relu, Cache::Output(y)) => {
                let dx = dy.zip_map(y, |g, out| if out > 0.0 { g } else { 0.0 })?;
                Ok((Some(dx), Vec::new()))
            }
            (Layer::Tanh, Cache::Output(y)) => Ok((Some(dy.zip_map(y, |g, t| g * (1.0 - t * t))?), Vec::new())),
            (Layer::Sigmoid, Cache::Output(y)) => Ok((Some(dy.zip_map(y, |g, s| g * s * (1.0 - s))?), Vec::new())),
            (Layer::BatchNorm { gamma, .. }, Cache::Norm { xhat, inv_std, batch_stats }) => {
                let features = gamma.len();
                let plane = dy.row_len() / features;
                let count = (batch * plane) as f64;
                let mut dgamma = vec![0.0; features];
                let mut dbeta = vec![0.0; features];
                for n in 0..batch {
                    for f in 0..features {
                        let off = (n * features + f) * plane;
                        for p in 0..plane {
                            dgamma[f] += dy.data()[off + p] * xhat.data()[off + p];
                            dbeta[f] += dy.data()[off + p];
                        }
                    }
                }
                let mut dx = dy.clone();
                for n in 0..batch {
                    for f in 0..features {
                        let off = (n * features + f) * plane;
                        let scale = gamma.data()[f] * inv_std[f];
                        for p in 0..plane {
                            let g = dy.data()[off + p];
                            dx.data_mut()[off + p] = if *batch_stats {
                                scale / count * (count * g - dbeta[f] - xhat.data()[off + p] * dgamma[f])
                            } else {
                                scale * g
                            };
                        }
                    }
                }
                Ok((
                    Some(dx),
                    vec![Tensor::new(vec![features], dgamma)?, Tensor::new(vec![features], dbeta)?],
                ))
            }
            (Layer::Reshape { .. }, Cache::Shape(shape)) => Ok((Some(dy.clone().reshape(shape)?), Vec::new())),
            (Layer::Dropout { .. }, Cache::Mask(mask)) => Ok((Some(dy.zip_map(mask, |g, m| g * m)?), Vec::new())),
            (Layer::Dropout { .. } | Layer::GaussianNoise { .. }, Cache::None) => Ok((Some(dy.clone()), Vec::new())),
            (layer, _) => Err(Error::invalid(format!("cache does not belong to a {} layer", layer.kind()))),
        }
    }

    fn conv_patches(&self, in_shape: &[usize]) -> Result<Patches> {
        let Layer::Conv2d { w, stride, pad, .. } = self else {
            unreachable!("conv_patches on non-conv layer")
        };
        let out = self.out_shape(&in_shape[1..])?;
        Ok(Patches {
            channels: in_shape[1],
            height: in_shape[2],
            width: in_shape[3],
            kernel: w.shape()[2],
            stride: *stride,
            pad: *pad,
            out_h: out[1],
            out_w: out[2],
        })
    }

    /// Patch geometry of the equivalent forward convolution running over the output image.
    fn transpose_patches(&self, in_shape: &[usize], out_sample: &[usize]) -> Result<Patches> {
        let Layer::ConvTranspose2d { w, stride, pad, .. } = self else {
            unreachable!("transpose_patches on non-transpose layer")
        };
        Ok(Patches {
            channels: w.shape()[1],
            height: out_sample[1],
            width: out_sample[2],
            kernel: w.shape()[2],
            stride: *stride,
            pad: *pad,
            out_h: in_shape[2],
            out_w: in_shape[3],
        })
    }
}

fn for_each_feature(data: &[f64], batch: usize, features: usize, plane: usize, mut f: impl FnMut(usize, f64)) {
    for n in 0..batch {
        for feat in 0..features {
            let off = (n * features + feat) * plane;
            for &v in &data[off..off + plane] {
                f(feat, v);
            }
        }
    }
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    let channels = bias.len();
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(dy: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut sums = vec![0.0; channels];
    for n in 0..batch {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += dy[(n * channels + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    sums
}
