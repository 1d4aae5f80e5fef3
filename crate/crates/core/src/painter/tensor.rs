//! Channel-major feature maps and the handful of layer primitives the
//! painter needs, each with an explicit backward.

use crate::error::{Error, Result};
use crate::image::Image;

/// A `C × H × W` feature map stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            data: vec![value; channels * height * width],
            ..Self::zeros(channels, height, width)
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.height, self.width)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, k: f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|v| v * k).collect(),
            ..*self
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn from_image(img: &Image) -> Self {
        let mut t = Self::zeros(3, img.height, img.width);
        let p = t.plane();
        for i in 0..p {
            for c in 0..3 {
                t.data[c * p + i] = img.data[3 * i + c];
            }
        }
        t
    }

    /// Interprets the first three channels as RGB.
    pub fn to_image(&self) -> Image {
        let mut img = Image::new(self.width, self.height);
        let p = self.plane();
        for i in 0..p {
            for c in 0..3.min(self.channels) {
                img.data[3 * i + c] = self.data[c * p + i];
            }
        }
        img
    }

    /// Stacks channels of tensors with equal spatial size.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let (h, w) = (parts[0].height, parts[0].width);
        if parts.iter().any(|t| t.height != h || t.width != w) {
            return Err(Error::Shape("concat: spatial sizes differ".into()));
        }
        let channels = parts.iter().map(|t| t.channels).sum();
        let mut data = Vec::with_capacity(channels * h * w);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Splits channels into consecutive groups of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Vec<Tensor> {
        let p = self.plane();
        let mut at = 0;
        sizes
            .iter()
            .map(|&c| {
                let t = Tensor {
                    channels: c,
                    height: self.height,
                    width: self.width,
                    data: self.data[at * p..(at + c) * p].to_vec(),
                };
                at += c;
                t
            })
            .collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `dx = dy * silu'(x)`.
pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().zip(&dy.data).map(|(&x, &g)| g * silu_grad(x)).collect(),
        ..*x
    }
}

/// `dx = dy * y (1 - y)` given the sigmoid output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        data: y.data.iter().zip(&dy.data).map(|(&y, &g)| g * y * (1.0 - y)).collect(),
        ..*y
    }
}

pub fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.shape();
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (c, h2, w2) = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = dy.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    out
}

/// `c = alpha * a b + beta * c` with arbitrary strides, `a` is `m × k`,
/// `b` is `k × n`, `c` is `m × n` row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above; strides describe dense matrices
    // inside the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square convolution with zero padding `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let (oh, ow) = self.output_size(x.height, x.width);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let np = oh * ow;
        let mut col = vec![0.0; self.patch() * np];
        for ic in 0..self.in_channels {
            let src = x.channel(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ic * k + ky) * k + kx) * np..][..np];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < x.width as isize {
                                row[oy * ow + ox] = src[iy as usize * x.width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize) -> Tensor {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let np = oh * ow;
        let mut x = Tensor::zeros(self.in_channels, h, w);
        for ic in 0..self.in_channels {
            let dst = x.channel_mut(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ic * k + ky) * k + kx) * np..][..np];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// `weight` is `[out][in][k][k]`; `bias` may be empty.
    pub fn forward(&self, weight: &[f64], bias: &[f64], x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let np = oh * ow;
        let kk = self.patch();
        let mut y = Tensor::zeros(self.out_channels, oh, ow);
        if self.kernel == 1 && self.stride == 1 {
            gemm(self.out_channels, kk, np, weight, (kk as isize, 1), &x.data, (np as isize, 1), &mut y.data, 0.0);
        } else {
            let col = self.im2col(x);
            gemm(self.out_channels, kk, np, weight, (kk as isize, 1), &col, (np as isize, 1), &mut y.data, 0.0);
        }
        if !bias.is_empty() {
            for (o, &b) in bias.iter().enumerate() {
                for v in y.channel_mut(o) {
                    *v += b;
                }
            }
        }
        y
    }

    /// Accumulates weight and bias gradients and returns `dL/dx`.
    pub fn backward(&self, weight: &[f64], x: &Tensor, dy: &Tensor, d_weight: &mut [f64], d_bias: &mut [f64]) -> Tensor {
        let np = dy.plane();
        let kk = self.patch();
        let one_by_one = self.kernel == 1 && self.stride == 1;
        let col_owned;
        let col: &[f64] = if one_by_one {
            &x.data
        } else {
            col_owned = self.im2col(x);
            &col_owned
        };
        gemm(self.out_channels, np, kk, &dy.data, (np as isize, 1), col, (1, np as isize), d_weight, 1.0);
        if !d_bias.is_empty() {
            for (o, db) in d_bias.iter_mut().enumerate() {
                *db += dy.channel(o).iter().sum::<f64>();
            }
        }
        let mut dcol = vec![0.0; kk * np];
        gemm(kk, self.out_channels, np, weight, (1, kk as isize), &dy.data, (np as isize, 1), &mut dcol, 0.0);
        if one_by_one {
            Tensor {
                channels: self.in_channels,
                height: x.height,
                width: x.width,
                data: dcol,
            }
        } else {
            self.col2im(&dcol, x.height, x.width)
        }
    }
}
