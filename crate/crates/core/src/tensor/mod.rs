//! Dense 3-D tensors, convolution kernels, and the forward ops used by the
//! unrolled inference network. Reverse-mode gradients live in [`tape`].

pub(crate) mod kernels;
pub mod params;
pub mod tape;

use rand::Rng;

use crate::error::{Error, Result};
use kernels::Geom;

pub use params::{ParamId, ParamShape, Params};
pub use tape::{Gradients, Tape, TraceEntry, Var};

/// A `(channels, height, width)` map stored channel-major, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "{} values for shape {channels}x{height}x{width}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn ones(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 1.0)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        height: usize,
        width: usize,
        lo: f64,
        hi: f64,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        same_shape("dot", self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Sum over channels, producing a 1-channel map.
    pub fn channel_sum(&self) -> Tensor {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(&self.data[c * n..(c + 1) * n]) {
                *o += v;
            }
        }
        Tensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    /// Multiply every channel by a 1-channel map.
    pub fn gate(&self, alpha: &Tensor) -> Result<Tensor> {
        if alpha.channels != 1 || alpha.height != self.height || alpha.width != self.width {
            return Err(Error::shape(
                "gate",
                format!("gate {:?} vs map {:?}", alpha.shape(), self.shape()),
            ));
        }
        let n = self.height * self.width;
        let mut out = self.data.clone();
        for c in 0..self.channels {
            for (o, a) in out[c * n..(c + 1) * n].iter_mut().zip(&alpha.data) {
                *o *= a;
            }
        }
        Ok(Tensor {
            data: out,
            ..*self
        })
    }
}

impl Tensor {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// A 2-D convolution kernel `(out_ch, in_ch, kh, kw)` with its stride and padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    values: Vec<f64>,
}

impl ConvKernel {
    pub fn new(
        (out_ch, in_ch, kh, kw): (usize, usize, usize, usize),
        stride: usize,
        padding: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("kernel stride must be >= 1"));
        }
        if kh == 0 || kw == 0 || out_ch == 0 || in_ch == 0 {
            return Err(Error::shape(
                "ConvKernel::new",
                format!("degenerate kernel {out_ch}x{in_ch}x{kh}x{kw}"),
            ));
        }
        if values.len() != out_ch * in_ch * kh * kw {
            return Err(Error::shape(
                "ConvKernel::new",
                format!(
                    "{} values for kernel {out_ch}x{in_ch}x{kh}x{kw}",
                    values.len()
                ),
            ));
        }
        Ok(ConvKernel {
            out_ch,
            in_ch,
            kh,
            kw,
            stride,
            padding,
            values,
        })
    }

    pub fn zeros(
        shape: (usize, usize, usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::new(shape, stride, padding, vec![0.0; shape.0 * shape.1 * shape.2 * shape.3])
    }

    /// Square odd kernel with stride 1 and size-preserving padding `(k-1)/2`.
    pub fn same(out_ch: usize, in_ch: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid(format!(
                "size-preserving kernel must be odd, got {k}"
            )));
        }
        Self::new((out_ch, in_ch, k, k), 1, (k - 1) / 2, values)
    }

    pub fn random_same<R: Rng + ?Sized>(
        rng: &mut R,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        scale: f64,
    ) -> Result<Self> {
        let values = (0..out_ch * in_ch * k * k)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Self::same(out_ch, in_ch, k, values)
    }

    /// 1x1 kernel, stride 1, no padding.
    pub fn pointwise(out_ch: usize, in_ch: usize, values: Vec<f64>) -> Result<Self> {
        Self::new((out_ch, in_ch, 1, 1), 1, 0, values)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.out_ch, self.in_ch, self.kh, self.kw)
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn in_ch(&self) -> usize {
        self.in_ch
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.values[((o * self.in_ch + i) * self.kh + ky) * self.kw + kx]
    }

    pub fn scaled(&self, s: f64) -> ConvKernel {
        ConvKernel {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// Same weights with `out_ch` and `in_ch` swapped (`k'[i][o] = k[o][i]`).
    pub fn swap_channels(&self) -> ConvKernel {
        let mut values = vec![0.0; self.values.len()];
        let plane = self.kh * self.kw;
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                let src = (o * self.in_ch + i) * plane;
                let dst = (i * self.out_ch + o) * plane;
                values[dst..dst + plane].copy_from_slice(&self.values[src..src + plane]);
            }
        }
        ConvKernel {
            out_ch: self.in_ch,
            in_ch: self.out_ch,
            values,
            ..*self
        }
    }

    pub(crate) fn geom(&self) -> Geom {
        Geom {
            out_ch: self.out_ch,
            in_ch: self.in_ch,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.padding,
        }
    }

    /// Spatial output size of a convolution over an `h x w` input.
    pub fn conv_output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_out_size(self.geom(), h, w)
    }

    /// Spatial output size of a transposed convolution over an `h x w` input.
    pub fn deconv_output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        deconv_out_size(self.geom(), h, w)
    }
}

pub(crate) fn conv_out_size(g: Geom, h: usize, w: usize) -> Result<(usize, usize)> {
    let (hp, wp) = (h + 2 * g.pad, w + 2 * g.pad);
    if hp < g.kh || wp < g.kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {}x{} larger than padded input {hp}x{wp}",
                g.kh, g.kw
            ),
        ));
    }
    Ok(((hp - g.kh) / g.stride + 1, (wp - g.kw) / g.stride + 1))
}

pub(crate) fn deconv_out_size(g: Geom, h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 {
        return Err(Error::shape("deconv2d", "empty input"));
    }
    let oh = ((h - 1) * g.stride + g.kh).checked_sub(2 * g.pad);
    let ow = ((w - 1) * g.stride + g.kw).checked_sub(2 * g.pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(Error::shape(
            "deconv2d",
            format!("padding {} too large for {h}x{w} input", g.pad),
        )),
    }
}

/// Cross-correlation of `x` with `k` (no bias).
pub fn conv2d(x: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    if x.channels != k.in_ch {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, kernel expects {}",
                x.channels, k.in_ch
            ),
        ));
    }
    let (oh, ow) = k.conv_output_size(x.height, x.width)?;
    let mut out = vec![0.0; k.out_ch * oh * ow];
    kernels::conv_forward(&x.data, x.dims(), &k.values, k.geom(), &mut out, (oh, ow));
    Tensor::new(k.out_ch, oh, ow, out)
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same kernel.
///
/// The kernel keeps its convolution layout, so the input must carry
/// `k.out_ch()` channels and the output carries `k.in_ch()`.
pub fn deconv2d(x: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    if x.channels != k.out_ch {
        return Err(Error::shape(
            "deconv2d",
            format!(
                "input has {} channels, kernel's leading dimension is {}",
                x.channels, k.out_ch
            ),
        ));
    }
    let (oh, ow) = k.deconv_output_size(x.height, x.width)?;
    let mut out = vec![0.0; k.in_ch * oh * ow];
    kernels::conv_backward_input(&x.data, x.dims(), &k.values, k.geom(), &mut out, (oh, ow));
    Tensor::new(k.in_ch, oh, ow, out)
}

pub(crate) fn pool_out_size(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("max-pool window and stride must be >= 1"));
    }
    if window > h || window > w {
        return Err(Error::shape(
            "maxpool",
            format!("window {window} larger than input {h}x{w}"),
        ));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

pub fn maxpool(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (oh, ow) = pool_out_size(x.height, x.width, window, stride)?;
    let mut out = vec![0.0; x.channels * oh * ow];
    let mut arg = vec![0usize; out.len()];
    kernels::maxpool_forward(&x.data, x.shape(), window, stride, &mut out, &mut arg, (oh, ow));
    Tensor::new(x.channels, oh, ow, out)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(kernels::sigmoid)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("mul", x, y)?;
    Ok(Tensor {
        data: x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect(),
        ..*x
    })
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("add", x, y)?;
    Ok(Tensor {
        data: x.data.iter().zip(&y.data).map(|(a, b)| a + b).collect(),
        ..*x
    })
}
