//! Dense single-image feature maps and the layer kernels that run on them.
//!
//! Every kernel takes its inputs by reference and returns a fresh tensor.
//! Layout is channel-major, then row-major (`C × H × W`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rect::{Margins, Rect};

/// `channels × height × width` of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn full_rect(&self) -> Rect {
        Rect::full(self.height, self.width)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(
                "tensor",
                format!("dimensions must be positive, got {channels}x{height}x{width}"),
            ));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "tensor",
                format!(
                    "data length {} does not match {channels}x{height}x{width}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: Shape::new(channels, height, width),
            data,
        })
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(shape.numel() > 0, "tensor dimensions must be positive");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor::new(shape.channels, shape.height, shape.width, data)
            .expect("from_fn requires positive dimensions")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.shape.height * self.shape.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// All channel values at one spatial position.
    pub fn column(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.shape.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Geometry and channel counts of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation_h: usize,
    pub dilation_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvAttrs {
    /// Square kernel, square stride/padding, no dilation.
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvAttrs {
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            dilation_h: 1,
            dilation_w: 1,
            in_channels,
            out_channels,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel_h >= 1
            && self.kernel_w >= 1
            && self.stride_h >= 1
            && self.stride_w >= 1
            && self.dilation_h >= 1
            && self.dilation_w >= 1
            && self.in_channels >= 1
            && self.out_channels >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "conv attributes out of range: {self:?}"
            )))
        }
    }

    /// Output spatial size, or `None` if the window does not fit.
    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let oh = conv_out_dim(height, self.kernel_h, self.stride_h, self.pad_h, self.dilation_h)?;
        let ow = conv_out_dim(width, self.kernel_w, self.stride_w, self.pad_w, self.dilation_w)?;
        Some((oh, ow))
    }

    /// Same geometry with padding removed; used when the caller pads explicitly.
    pub fn unpadded(&self) -> Self {
        ConvAttrs {
            pad_h: 0,
            pad_w: 0,
            ..*self
        }
    }
}

pub(crate) fn conv_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

pub fn conv2d(input: &Tensor, weight: &[f32], bias: &[f32], attrs: &ConvAttrs) -> Result<Tensor> {
    attrs.validate()?;
    if input.channels() != attrs.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, attrs expect {}",
                input.channels(),
                attrs.in_channels
            ),
        ));
    }
    if weight.len() != attrs.weight_len() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight has {} elements, expected {}",
                weight.len(),
                attrs.weight_len()
            ),
        ));
    }
    if bias.len() != attrs.out_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias has {} elements, expected {}",
                bias.len(),
                attrs.out_channels
            ),
        ));
    }
    let (in_h, in_w) = (input.height(), input.width());
    let (out_h, out_w) = attrs.output_size(in_h, in_w).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("kernel does not fit {in_h}x{in_w} input with {attrs:?}"),
        )
    })?;

    let (kh, kw) = (attrs.kernel_h, attrs.kernel_w);
    let (sh, sw) = (attrs.stride_h as isize, attrs.stride_w as isize);
    let (ph, pw) = (attrs.pad_h as isize, attrs.pad_w as isize);
    let (dh, dw) = (attrs.dilation_h as isize, attrs.dilation_w as isize);
    let plane = out_h * out_w;
    let mut out = vec![0.0f32; attrs.out_channels * plane];

    // Contributions reach each output pixel in (in_channel, ky, kx) order,
    // the same order as a per-pixel nested loop.
    for oc in 0..attrs.out_channels {
        let acc = &mut out[oc * plane..(oc + 1) * plane];
        for ic in 0..attrs.in_channels {
            let src = input.plane(ic);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[((oc * attrs.in_channels + ic) * kh + ky) * kw + kx];
                    let x_off = kx as isize * dw - pw;
                    let (ox_lo, ox_hi) = valid_range(x_off, sw, in_w, out_w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..out_h {
                        let iy = oy as isize * sh + ky as isize * dh - ph;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * in_w..(iy as usize + 1) * in_w];
                        let dst = &mut acc[oy * out_w..(oy + 1) * out_w];
                        if sw == 1 {
                            let start = (ox_lo as isize + x_off) as usize;
                            let src_row = &row[start..start + (ox_hi - ox_lo)];
                            for (d, &s) in dst[ox_lo..ox_hi].iter_mut().zip(src_row) {
                                *d += wv * s;
                            }
                            continue;
                        }
                        for ox in ox_lo..ox_hi {
                            let ix = (ox as isize * sw + x_off) as usize;
                            dst[ox] += wv * row[ix];
                        }
                    }
                }
            }
        }
        let b = bias[oc];
        for v in acc.iter_mut() {
            *v += b;
        }
    }
    Tensor::new(attrs.out_channels, out_h, out_w, out)
}

/// Range of output indices `o` with `0 <= o*stride + offset < input`.
fn valid_range(offset: isize, stride: isize, input: usize, output: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + stride - 1) / stride) as usize
    };
    let last = input as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        ((last / stride) as usize + 1).min(output)
    };
    (lo.min(output), hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointwiseKind {
    Relu,
    Sigmoid,
    /// Inference-mode batch norm with running statistics folded into a
    /// per-channel scale and shift.
    #[serde(rename = "batchnorm")]
    BatchNorm,
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn pointwise(
    input: &Tensor,
    kind: PointwiseKind,
    affine: Option<(&[f32], &[f32])>,
) -> Result<Tensor> {
    let mut out = input.clone();
    match kind {
        PointwiseKind::Relu => out.data.iter_mut().for_each(|v| *v = v.max(0.0)),
        PointwiseKind::Sigmoid => out.data.iter_mut().for_each(|v| *v = sigmoid(*v)),
        PointwiseKind::BatchNorm => {
            let (scale, shift) = affine.ok_or_else(|| {
                Error::InvalidArgument("batchnorm requires scale and shift".into())
            })?;
            let c = input.channels();
            if scale.len() != c || shift.len() != c {
                return Err(Error::shape(
                    "batchnorm",
                    format!(
                        "scale/shift lengths {}/{} do not match {c} channels",
                        scale.len(),
                        shift.len()
                    ),
                ));
            }
            let n = input.height() * input.width();
            for (ch, chunk) in out.data.chunks_mut(n).enumerate() {
                let (s, t) = (scale[ch], shift[ch]);
                chunk.iter_mut().for_each(|v| *v = *v * s + t);
            }
        }
    }
    Ok(out)
}

/// Max pooling with zero padding only.
pub fn maxpool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "maxpool kernel and stride must be positive".into(),
        ));
    }
    let (in_h, in_w) = (input.height(), input.width());
    if kernel > in_h || kernel > in_w {
        return Err(Error::shape(
            "maxpool2d",
            format!("kernel {kernel} larger than {in_h}x{in_w} input"),
        ));
    }
    let out_h = (in_h - kernel) / stride + 1;
    let out_w = (in_w - kernel) / stride + 1;
    let shape = Shape::new(input.channels(), out_h, out_w);
    let mut out = Tensor::zeros(shape);
    for c in 0..shape.channels {
        let src = input.plane(c);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    let row = (oy * stride + ky) * in_w;
                    for kx in 0..kernel {
                        m = m.max(src[row + ox * stride + kx]);
                    }
                }
                out.set(c, oy, ox, m);
            }
        }
    }
    Ok(out)
}

/// Half-pixel source coordinate of destination index `dst`, clamped to the
/// source extent.
#[inline]
fn source_coord(dst: i64, scale: usize, extent: usize) -> f32 {
    let s = (dst as f32 + 0.5) / scale as f32 - 0.5;
    s.clamp(0.0, (extent - 1) as f32)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Integer upsampling by `scale` with half-pixel centers (align-corners off).
pub fn bilinear_upsample(input: &Tensor, scale: usize) -> Result<Tensor> {
    let (h, w) = (input.height(), input.width());
    upsample_window(
        input,
        (0, 0),
        (h, w),
        scale,
        Rect::full(h * scale, w * scale),
    )
}

/// Computes the `out_rect` window of a bilinear upsample of a `source`-sized
/// map, given only the patch of that map whose top-left corner sits at
/// `origin`. Source coordinates are clamped against the whole map, so the
/// result equals the matching window of the full upsample.
pub fn upsample_window(
    patch: &Tensor,
    origin: (i64, i64),
    source: (usize, usize),
    scale: usize,
    out_rect: Rect,
) -> Result<Tensor> {
    if !(scale == 2 || scale == 4) {
        return Err(Error::InvalidArgument(format!(
            "upsample scale must be 2 or 4, got {scale}"
        )));
    }
    let (src_h, src_w) = source;
    if !out_rect.is_valid()
        || !Rect::full(src_h * scale, src_w * scale).contains(&out_rect)
    {
        return Err(Error::shape(
            "upsample",
            format!(
                "window {out_rect} outside {}x{} output",
                src_h * scale,
                src_w * scale
            ),
        ));
    }
    let patch_rect = Rect::new(
        origin.0,
        origin.1,
        origin.0 + patch.height() as i64 - 1,
        origin.1 + patch.width() as i64 - 1,
    );

    // (low index, high index, weight of high) per output row / column.
    let taps = |lo: i64, hi: i64, extent: usize| -> Vec<(i64, i64, f32)> {
        (lo..=hi)
            .map(|d| {
                let s = source_coord(d, scale, extent);
                let i0 = s.floor() as i64;
                let t = s - i0 as f32;
                let i1 = if t > 0.0 {
                    (i0 + 1).min(extent as i64 - 1)
                } else {
                    i0
                };
                (i0, i1, t)
            })
            .collect()
    };
    let rows = taps(out_rect.top, out_rect.bottom, src_h);
    let cols = taps(out_rect.left, out_rect.right, src_w);
    for &(r0, r1, _) in &rows {
        for &(c0, c1, _) in [cols.first(), cols.last()].into_iter().flatten() {
            if !patch_rect.contains_point(r0, c0) || !patch_rect.contains_point(r1, c1) {
                return Err(Error::shape(
                    "upsample",
                    format!("patch {patch_rect} does not cover sources of {out_rect}"),
                ));
            }
        }
    }

    let shape = Shape::new(
        patch.channels(),
        out_rect.height() as usize,
        out_rect.width() as usize,
    );
    let mut out = Tensor::zeros(shape);
    for c in 0..shape.channels {
        for (oy, &(r0, r1, ty)) in rows.iter().enumerate() {
            let (r0, r1) = ((r0 - origin.0) as usize, (r1 - origin.0) as usize);
            for (ox, &(c0, c1, tx)) in cols.iter().enumerate() {
                let (c0, c1) = ((c0 - origin.1) as usize, (c1 - origin.1) as usize);
                let top = lerp(patch.get(c, r0, c0), patch.get(c, r0, c1), tx);
                let bottom = lerp(patch.get(c, r1, c0), patch.get(c, r1, c1), tx);
                out.set(c, oy, ox, lerp(top, bottom, ty));
            }
        }
    }
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape("add", format!("{} vs {}", a.shape, b.shape)));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape,
        data,
    })
}

pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(
            "concat",
            format!("spatial dims differ: {} vs {}", a.shape, b.shape),
        ));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(a.channels() + b.channels(), a.height(), a.width(), data)
}

/// Copies the sub-window `rect` (in the tensor's own frame).
pub fn crop(input: &Tensor, rect: Rect) -> Result<Tensor> {
    if !rect.is_valid() || !input.shape.full_rect().contains(&rect) {
        return Err(Error::shape(
            "crop",
            format!("rect {rect} outside {} tensor", input.shape),
        ));
    }
    if rect == input.shape.full_rect() {
        return Ok(input.clone());
    }
    let (h, w) = (rect.height() as usize, rect.width() as usize);
    let (top, left) = (rect.top as usize, rect.left as usize);
    let mut data = Vec::with_capacity(input.channels() * h * w);
    for c in 0..input.channels() {
        let src = input.plane(c);
        for y in top..top + h {
            let start = y * input.width() + left;
            data.extend_from_slice(&src[start..start + w]);
        }
    }
    Tensor::new(input.channels(), h, w, data)
}

/// Extends every border by the given margin, filling with `value`.
pub fn pad(input: &Tensor, margins: Margins, value: f32) -> Tensor {
    if margins.is_zero() {
        return input.clone();
    }
    let h = input.height() + margins.top + margins.bottom;
    let w = input.width() + margins.left + margins.right;
    let mut out = Tensor::filled(Shape::new(input.channels(), h, w), value);
    for c in 0..input.channels() {
        let src = input.plane(c);
        for y in 0..input.height() {
            let dst = (c * h + y + margins.top) * w + margins.left;
            out.data[dst..dst + input.width()]
                .copy_from_slice(&src[y * input.width()..(y + 1) * input.width()]);
        }
    }
    out
}
