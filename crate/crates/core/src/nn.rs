//! Layer kernels: convolution, batch normalization, pooling, dense, softmax.
//!
//! Each forward kernel has a matching backward kernel used by the tape. The
//! kernels are plain functions over [`Tensor`] so they can also be called
//! without tracing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;

/// `c = a·b + beta·c` for row/column strided matrices (`a` is m×k, `b` is k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, a_strides));
    assert!(b.len() >= last(k, n, b_strides));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &Tensor,
        weights: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = input.dims4("conv2d")?;
        let (f, wc, kh, kw) = weights.dims4("conv2d")?;
        if wc != c {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "input channels",
                expected: wc,
                got: c,
            });
        }
        if bias.len() != f {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "bias",
                expected: f,
                got: bias.len(),
            });
        }
        if stride == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                shape: weights.shape().to_vec(),
                reason: "kernel sides must be odd and stride positive".into(),
            });
        }
        let out_dim = |size: usize, k: usize, axis: &'static str| -> Result<usize> {
            let span = size + 2 * padding;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::Shape {
                    op: "conv2d",
                    shape: input.shape().to_vec(),
                    reason: format!("{axis} does not tile with kernel {k}, stride {stride}"),
                });
            }
            Ok((span - k) / stride + 1)
        };
        let oh = out_dim(h, kh, "height")?;
        let ow = out_dim(w, kw, "width")?;
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds image `img` (C×H×W slice) into a `patch_len × positions` matrix.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation, `input` is N×C×H×W and `weights` F×C×kH×kW.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weights, bias, stride, padding)?;
    let (plen, p) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; g.n * g.f * p];
    let mut cols = vec![0.0; plen * p];
    let img_len = g.c * g.h * g.w;
    for n in 0..g.n {
        let dst = &mut out[n * g.f * p..(n + 1) * g.f * p];
        for (f, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[f]);
        }
        g.im2col(&input.data()[n * img_len..(n + 1) * img_len], &mut cols);
        gemm(
            g.f,
            plen,
            p,
            weights.data(),
            (plen, 1),
            &cols,
            (p, 1),
            dst,
            1.0,
        );
    }
    Tensor::new([g.n, g.f, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`]; each output is computed only when requested.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<[Option<Tensor>; 3]> {
    let g = ConvGeometry::new(input, weights, bias, stride, padding)?;
    let (plen, p) = (g.patch_len(), g.positions());
    let img_len = g.c * g.h * g.w;
    let mut dx = need[0].then(|| vec![0.0; input.len()]);
    let mut dw = need[1].then(|| vec![0.0; weights.len()]);
    let mut db = need[2].then(|| vec![0.0; g.f]);
    let mut cols = vec![0.0; plen * p];
    for n in 0..g.n {
        let gy = &grad_out.data()[n * g.f * p..(n + 1) * g.f * p];
        if let Some(db) = db.as_mut() {
            for (f, chunk) in gy.chunks(p).enumerate() {
                db[f] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            g.im2col(&input.data()[n * img_len..(n + 1) * img_len], &mut cols);
            gemm(g.f, p, plen, gy, (p, 1), &cols, (1, p), dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                plen,
                g.f,
                p,
                weights.data(),
                (1, plen),
                gy,
                (p, 1),
                &mut cols,
                0.0,
            );
            g.col2im(&cols, &mut dx[n * img_len..(n + 1) * img_len]);
        }
    }
    Ok([
        dx.map(|v| Tensor::new(input.shape(), v)).transpose()?,
        dw.map(|v| Tensor::new(weights.shape(), v)).transpose()?,
        db.map(|v| Tensor::new(bias.shape(), v)).transpose()?,
    ])
}

/// Per-channel statistics over the (N, H, W) axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Population (biased) variance.
    pub var: Vec<f64>,
}

pub fn channel_stats(input: &Tensor) -> Result<ChannelStats> {
    let (n, c, h, w) = input.dims4("batchnorm")?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for img in 0..n {
            s += x[(img * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut v = 0.0;
        for img in 0..n {
            v += x[(img * c + ch) * hw..][..hw]
                .iter()
                .map(|&a| (a - mu) * (a - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / count;
    }
    Ok(ChannelStats { mean, var })
}

fn check_channels(input: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4("batchnorm")?;
    if c != channels {
        return Err(Error::Dimension {
            op: "batchnorm",
            axis: "channels",
            expected: channels,
            got: c,
        });
    }
    Ok((n, c, h * w))
}

/// `gamma·(x − mean)/sqrt(var + eps) + beta` per channel.
pub fn batchnorm_apply(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    stats: &ChannelStats,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, hw) = check_channels(input, gamma.len())?;
    let mut out = input.clone();
    let y = out.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (stats.var[ch] + eps).sqrt();
        let (mu, g, b) = (stats.mean[ch], gamma[ch], beta[ch]);
        for img in 0..n {
            for v in &mut y[(img * c + ch) * hw..][..hw] {
                *v = g * ((*v - mu) * inv) + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`batchnorm_apply`] with respect to (input, gamma, beta).
///
/// With `through_stats` the statistics are treated as functions of the input
/// (batch statistics); otherwise they are constants (running statistics).
pub fn batchnorm_backward(
    input: &Tensor,
    gamma: &[f64],
    stats: &ChannelStats,
    eps: f64,
    through_stats: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, hw) = check_channels(input, gamma.len())?;
    let m = (n * hw) as f64;
    let x = input.data();
    let gy = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (stats.var[ch] + eps).sqrt();
        let mu = stats.mean[ch];
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for img in 0..n {
            let off = (img * c + ch) * hw;
            for i in off..off + hw {
                let xhat = (x[i] - mu) * inv;
                sum_g += gy[i];
                sum_gx += gy[i] * xhat;
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let scale = gamma[ch] * inv;
        for img in 0..n {
            let off = (img * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = if through_stats {
                    let xhat = (x[i] - mu) * inv;
                    scale * (gy[i] - sum_g / m - xhat * sum_gx / m)
                } else {
                    scale * gy[i]
                };
            }
        }
    }
    Ok((Tensor::new(input.shape(), dx)?, dgamma, dbeta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with statistics of the current input.
    Adapt,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Batch normalization layer over N×C×H×W inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormOutput {
    pub output: Tensor,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn running_stats(&self) -> ChannelStats {
        ChannelStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
        }
    }

    /// Normalizes `input`. Neither mode mutates the running statistics.
    pub fn forward(&self, input: &Tensor, mode: BnMode) -> Result<BatchNormOutput> {
        let (n, _, hw) = check_channels(input, self.channels())?;
        let batch = channel_stats(input)?;
        let stats = match mode {
            BnMode::Adapt => {
                if n * hw < 2 {
                    return Err(Error::Shape {
                        op: "batchnorm",
                        shape: input.shape().to_vec(),
                        reason: "adapt mode needs at least two values per channel".into(),
                    });
                }
                batch.clone()
            }
            BnMode::Eval => self.running_stats(),
        };
        let output = batchnorm_apply(input, &self.gamma, &self.beta, &stats, self.epsilon)?;
        Ok(BatchNormOutput {
            output,
            batch_mean: batch.mean,
            batch_var: batch.var,
        })
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    let (out, _) = maxpool2_with_argmax(input)?;
    Ok(out)
}

pub(crate) fn maxpool2_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape {
            op: "maxpool2",
            shape: input.shape().to_vec(),
            reason: "spatial size below 2".into(),
        });
    }
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

/// `input·weightsᵀ + bias` with input N×in and weights out×in.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, fan_in) = input.dims2("dense")?;
    let (fan_out, w_in) = weights.dims2("dense")?;
    if w_in != fan_in {
        return Err(Error::Dimension {
            op: "dense",
            axis: "input features",
            expected: w_in,
            got: fan_in,
        });
    }
    if bias.len() != fan_out {
        return Err(Error::Dimension {
            op: "dense",
            axis: "bias",
            expected: fan_out,
            got: bias.len(),
        });
    }
    let mut out = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(
        n,
        fan_in,
        fan_out,
        input.data(),
        (fan_in, 1),
        weights.data(),
        (1, fan_in),
        &mut out,
        1.0,
    );
    Tensor::new([n, fan_out], out)
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<[Option<Tensor>; 3]> {
    let (n, fan_in) = input.dims2("dense")?;
    let (fan_out, _) = weights.dims2("dense")?;
    let gy = grad_out.data();
    let dx = if need[0] {
        let mut dx = vec![0.0; n * fan_in];
        gemm(
            n,
            fan_out,
            fan_in,
            gy,
            (fan_out, 1),
            weights.data(),
            (fan_in, 1),
            &mut dx,
            0.0,
        );
        Some(Tensor::new([n, fan_in], dx)?)
    } else {
        None
    };
    let dw = if need[1] {
        let mut dw = vec![0.0; fan_out * fan_in];
        gemm(
            fan_out,
            n,
            fan_in,
            gy,
            (1, fan_out),
            input.data(),
            (fan_in, 1),
            &mut dw,
            0.0,
        );
        Some(Tensor::new([fan_out, fan_in], dw)?)
    } else {
        None
    };
    let db = need[2].then(|| {
        let mut db = vec![0.0; fan_out];
        for row in gy.chunks(fan_out) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Tensor::vector(db)
    });
    Ok([dx, dw, db])
}

/// Softmax along each row of a 2-D tensor.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2("softmax_rows")?;
    let mut out = m.clone();
    for r in 0..rows {
        softmax_strided(out.data_mut(), r * cols, 1, cols);
    }
    Ok(out)
}

/// Softmax along each column of a 2-D tensor.
pub fn softmax_cols(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2("softmax_cols")?;
    let mut out = m.clone();
    for c in 0..cols {
        softmax_strided(out.data_mut(), c, cols, rows);
    }
    Ok(out)
}

fn softmax_strided(data: &mut [f64], start: usize, step: usize, count: usize) {
    let idx = |i: usize| start + i * step;
    let max = (0..count).fold(f64::NEG_INFINITY, |m, i| m.max(data[idx(i)]));
    let mut total = 0.0;
    for i in 0..count {
        let e = (data[idx(i)] - max).exp();
        data[idx(i)] = e;
        total += e;
    }
    for i in 0..count {
        data[idx(i)] /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn([1, 1, 3, 3], |i| i as f64 + 1.0);
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, &Tensor::zeros([1]), 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn bias_only_convolution() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let k = Tensor::full([3, 2, 3, 3], 0.7);
        let y = conv2d(&x, &k, &Tensor::full([3], 0.5), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_reports_offending_axis() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let k = Tensor::zeros([1, 3, 3, 3]);
        match conv2d(&x, &k, &Tensor::zeros([1]), 1, 1) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
        let even = Tensor::zeros([1, 2, 2, 2]);
        assert!(conv2d(&x, &even, &Tensor::zeros([1]), 1, 1).is_err());
        // (5 + 0 - 3) / 2 + 1 is integral, (6 - 3) / 2 is not
        let k = Tensor::zeros([1, 2, 3, 3]);
        assert!(conv2d(&Tensor::zeros([1, 2, 5, 5]), &k, &Tensor::zeros([1]), 2, 0).is_ok());
        assert!(conv2d(&Tensor::zeros([1, 2, 6, 6]), &k, &Tensor::zeros([1]), 2, 0).is_err());
    }

    #[test]
    fn batchnorm_two_values() {
        let layer = BatchNormLayer::new(1, 0.1);
        let x = Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let out = layer.forward(&x, BnMode::Adapt).unwrap();
        assert_eq!(out.batch_mean, vec![2.0]);
        assert_eq!(out.batch_var, vec![1.0]);
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(close(out.output.data()[0], -expected, 1e-15));
        assert!(close(out.output.data()[1], expected, 1e-15));
        assert!(close(expected, 0.999995, 1e-6));
    }

    #[test]
    fn batchnorm_zero_scale_outputs_beta() {
        let mut layer = BatchNormLayer::new(2, 0.1);
        layer.gamma = vec![0.0, 0.0];
        layer.beta = vec![0.25, -3.0];
        let x = Tensor::from_fn([2, 2, 3, 3], |i| (i as f64).sin());
        for mode in [BnMode::Adapt, BnMode::Eval] {
            let y = layer.forward(&x, mode).unwrap().output;
            for (i, v) in y.data().iter().enumerate() {
                let ch = (i / 9) % 2;
                assert_eq!(*v, layer.beta[ch]);
            }
        }
    }

    #[test]
    fn eval_with_matched_statistics_equals_adapt() {
        let x = Tensor::from_fn([2, 3, 4, 4], |i| ((i * 7919) % 97) as f64 / 13.0);
        let mut layer = BatchNormLayer::new(3, 0.1);
        layer.gamma = vec![1.5, 0.5, -1.0];
        layer.beta = vec![0.1, 0.2, 0.3];
        let adapt = layer.forward(&x, BnMode::Adapt).unwrap();
        layer.running_mean = adapt.batch_mean.clone();
        layer.running_var = adapt.batch_var.clone();
        let eval = layer.forward(&x, BnMode::Eval).unwrap();
        assert!(adapt.output.max_abs_diff(&eval.output) < 1e-12);
    }

    #[test]
    fn batchnorm_channel_mismatch() {
        let layer = BatchNormLayer::new(3, 0.1);
        assert!(matches!(
            layer.forward(&Tensor::zeros([1, 2, 2, 2]), BnMode::Eval),
            Err(Error::Dimension { .. })
        ));
        assert!(layer
            .forward(&Tensor::zeros([1, 3, 1, 1]), BnMode::Adapt)
            .is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::new([1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(close(s.data()[0], 0.7311, 5e-5));
        assert!(close(s.data()[1], 0.2689, 5e-5));
        let u = softmax_rows(&Tensor::full([2, 4], 3.0)).unwrap();
        assert!(u.data().iter().all(|&v| close(v, 0.25, 1e-15)));
        let c = softmax_cols(&Tensor::new([2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(close(c.data()[0], 0.7311, 5e-5));
    }

    #[test]
    fn maxpool_constant() {
        let x = Tensor::full([1, 2, 4, 6], 1.25);
        let y = maxpool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn sigmoid_is_stable() {
        let y = sigmoid(&Tensor::vector(vec![-800.0, 0.0, 800.0]));
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }
}
