//! Dense height × width × channels grids and the handful of differentiable
//! operations the flow and integration models are built from.
//!
//! Gradients are composed by hand: every forward op that sits on a training
//! path has a matching `*_backward` that returns the exact adjoint.

use crate::error::{dim_err, Error, Result};

/// Row-major `(row, col, channel)` storage of real scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(dim_err(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(row, col, channel)` at every entry.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    #[inline]
    pub fn add_at(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] += value;
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(dim_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub(crate) fn check_same_plane(&self, other: &Grid, what: &str) -> Result<()> {
        if self.height == other.height && self.width == other.width {
            Ok(())
        } else {
            Err(dim_err(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Extracts a single channel as a one-channel grid.
    pub fn channel(&self, c: usize) -> Grid {
        Grid::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    /// Stacks grids along the channel axis.
    pub fn concat_channels(parts: &[&Grid]) -> Result<Grid> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero grids".into()))?;
        for p in parts {
            first.check_same_plane(p, "concat_channels")?;
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut out = Grid::zeros(first.height, first.width, channels);
        for y in 0..first.height {
            for x in 0..first.width {
                let mut c0 = 0;
                for p in parts {
                    for c in 0..p.channels {
                        out.set(y, x, c0 + c, p.get(y, x, c));
                    }
                    c0 += p.channels;
                }
            }
        }
        Ok(out)
    }

    /// Copies channels `[start, start + count)` into a new grid.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Grid> {
        if start + count > self.channels {
            return Err(dim_err(format!(
                "channel slice {start}+{count} exceeds {}",
                self.channels
            )));
        }
        Ok(Grid::from_fn(self.height, self.width, count, |y, x, c| {
            self.get(y, x, start + c)
        }))
    }

    /// Copies the rectangle of rows `[y0, y1)` and columns `[x0, x1)`.
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Grid> {
        if y0 >= y1 || x0 >= x1 || y1 > self.height || x1 > self.width {
            return Err(Error::Argument(format!(
                "crop rows {y0}..{y1} cols {x0}..{x1} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Grid::from_fn(y1 - y0, x1 - x0, self.channels, |y, x, c| {
            self.get(y0 + y, x0 + x, c)
        }))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn abs(&self) -> Grid {
        self.map(f64::abs)
    }

    pub fn scale(&self, k: f64) -> Grid {
        self.map(|v| v * k)
    }

    pub fn add_scalar(&self, k: f64) -> Grid {
        self.map(|v| v + k)
    }

    pub fn sigmoid(&self) -> Grid {
        self.map(sigmoid)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Grid {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Mean over entries whose pixel has nonzero weight in `mask`
    /// (a one-channel grid of the same plane size), weighted by the mask.
    /// An all-zero mask yields 0.
    pub fn masked_mean(&self, mask: &Grid) -> Result<f64> {
        self.check_same_plane(mask, "masked_mean")?;
        if mask.channels != 1 {
            return Err(dim_err("masked_mean: mask must have one channel"));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (px, &w) in mask.data.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for c in 0..self.channels {
                num += w * self.data[px * self.channels + c];
            }
            den += w * self.channels as f64;
        }
        Ok(if den == 0.0 { 0.0 } else { num / den })
    }

    /// Inner product over all entries.
    pub fn dot(&self, other: &Grid) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Grid) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Convolution weights laid out `[out][in][kh][kw]`, with an optional
/// per-output-channel bias. Kernel extents are odd so "same" padding is
/// symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    in_channels: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl ConvKernel {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        with_bias: bool,
    ) -> Result<Self> {
        Self::new(
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            vec![0.0; in_channels * out_channels * kernel_h * kernel_w],
            with_bias.then(|| vec![0.0; out_channels]),
        )
    }

    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::Argument(format!(
                "kernel extents must be odd, got {kernel_h}x{kernel_w}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Argument("kernel needs at least one channel".into()));
        }
        if weights.len() != in_channels * out_channels * kernel_h * kernel_w {
            return Err(dim_err(format!(
                "weights length {} != {out_channels}x{in_channels}x{kernel_h}x{kernel_w}",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(dim_err(format!(
                    "bias length {} != out channels {out_channels}",
                    b.len()
                )));
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            weights,
            bias,
        })
    }

    /// 1×1 kernel mapping each channel onto itself.
    pub fn identity(channels: usize, with_bias: bool) -> Self {
        let mut k = Self::zeros(channels, channels, 1, 1, with_bias).expect("valid shape");
        for c in 0..channels {
            let i = k.widx(c, c, 0, 0);
            k.weights[i] = 1.0;
        }
        k
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    #[inline]
    pub fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.in_channels + ci) * self.kernel_h + ky) * self.kernel_w + kx
    }

    #[inline]
    pub fn weight(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.widx(co, ci, ky, kx)]
    }

    pub fn set_weight(&mut self, co: usize, ci: usize, ky: usize, kx: usize, v: f64) {
        let i = self.widx(co, ci, ky, kx);
        self.weights[i] = v;
    }

    /// Number of scalars (weights plus bias).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Appends weights then bias to `out`.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
    }

    /// Overwrites weights then bias from the front of `src`, returning the rest.
    pub fn load_from<'a>(&mut self, src: &'a [f64]) -> Result<&'a [f64]> {
        let n = self.param_count();
        if src.len() < n {
            return Err(dim_err(format!(
                "need {n} scalars for kernel, got {}",
                src.len()
            )));
        }
        let w = self.weights.len();
        self.weights.copy_from_slice(&src[..w]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&src[w..n]);
        }
        Ok(&src[n..])
    }

    /// A kernel of the same shape with every scalar zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            bias: self.bias.as_ref().map(|b| vec![0.0; b.len()]),
            ..*self
        }
    }

    pub fn same_shape(&self, other: &ConvKernel) -> bool {
        self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
            && self.kernel_h == other.kernel_h
            && self.kernel_w == other.kernel_w
            && self.bias.is_some() == other.bias.is_some()
    }
}

/// Shape-only view used by serialization headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvKernelShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub has_bias: bool,
}

impl ConvKernel {
    pub fn shape(&self) -> ConvKernelShape {
        ConvKernelShape {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            has_bias: self.bias.is_some(),
        }
    }
}

/// Zero-padded "same" convolution (cross-correlation, as in deep learning
/// frameworks).
pub fn conv2d(input: &Grid, kernel: &ConvKernel) -> Result<Grid> {
    if input.channels() != kernel.in_channels {
        return Err(dim_err(format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels
        )));
    }
    let (h, w) = (input.height(), input.width());
    let (kh, kw) = (kernel.kernel_h, kernel.kernel_w);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Grid::zeros(h, w, kernel.out_channels);
    for y in 0..h {
        for x in 0..w {
            for co in 0..kernel.out_channels {
                let mut acc = kernel.bias.as_ref().map_or(0.0, |b| b[co]);
                for ky in 0..kh {
                    let Some(sy) = (y + ky).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(sx) = (x + kx).checked_sub(pw).filter(|&v| v < w) else {
                            continue;
                        };
                        let base = input.index(sy, sx, 0);
                        for ci in 0..kernel.in_channels {
                            acc += kernel.weight(co, ci, ky, kx) * input.data[base + ci];
                        }
                    }
                }
                out.set(y, x, co, acc);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`]: gradients of `<conv2d(input, kernel), upstream>`
/// with respect to the input and to every kernel scalar.
pub fn conv2d_backward(
    input: &Grid,
    kernel: &ConvKernel,
    upstream: &Grid,
) -> Result<(Grid, ConvKernel)> {
    if input.channels() != kernel.in_channels {
        return Err(dim_err("conv2d_backward: input/kernel channel mismatch"));
    }
    if upstream.shape() != (input.height(), input.width(), kernel.out_channels) {
        return Err(dim_err(format!(
            "conv2d_backward: upstream {:?} does not match output {:?}",
            upstream.shape(),
            (input.height(), input.width(), kernel.out_channels)
        )));
    }
    let (h, w) = (input.height(), input.width());
    let (kh, kw) = (kernel.kernel_h, kernel.kernel_w);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut grad_in = Grid::zeros(h, w, input.channels());
    let mut grad_k = kernel.zeros_like();
    for y in 0..h {
        for x in 0..w {
            for co in 0..kernel.out_channels {
                let g = upstream.get(y, x, co);
                if g == 0.0 {
                    continue;
                }
                if let Some(b) = &mut grad_k.bias {
                    b[co] += g;
                }
                for ky in 0..kh {
                    let Some(sy) = (y + ky).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(sx) = (x + kx).checked_sub(pw).filter(|&v| v < w) else {
                            continue;
                        };
                        let base = input.index(sy, sx, 0);
                        for ci in 0..kernel.in_channels {
                            let wi = kernel.widx(co, ci, ky, kx);
                            grad_k.weights[wi] += g * input.data[base + ci];
                            grad_in.data[base + ci] += g * kernel.weights[wi];
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_k))
}

/// Interpolation taps `(lower, upper, frac)` for each output index along one
/// axis, using half-pixel centers clamped to the input extent.
fn resize_taps(n_in: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    let last = (n_in - 1) as f64;
    (0..n_in * scale)
        .map(|i| {
            let src = ((i as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with half-pixel alignment.
pub fn bilinear_resize(input: &Grid, scale: usize) -> Result<Grid> {
    if scale == 0 {
        return Err(Error::Argument("resize scale must be >= 1".into()));
    }
    if scale == 1 {
        return Ok(input.clone());
    }
    let (h, w, ch) = input.shape();
    if h == 0 || w == 0 {
        return Ok(Grid::zeros(h * scale, w * scale, ch));
    }
    let ty = resize_taps(h, scale);
    let tx = resize_taps(w, scale);
    let mut out = Grid::zeros(h * scale, w * scale, ch);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            for c in 0..ch {
                let top = (1.0 - fx) * input.get(y0, x0, c) + fx * input.get(y0, x1, c);
                let bot = (1.0 - fx) * input.get(y1, x0, c) + fx * input.get(y1, x1, c);
                out.set(oy, ox, c, (1.0 - fy) * top + fy * bot);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`] (scatter of `upstream` back onto the
/// low-resolution grid).
pub fn bilinear_resize_backward(
    input_shape: (usize, usize, usize),
    scale: usize,
    upstream: &Grid,
) -> Result<Grid> {
    if scale == 0 {
        return Err(Error::Argument("resize scale must be >= 1".into()));
    }
    let (h, w, ch) = input_shape;
    if upstream.shape() != (h * scale, w * scale, ch) {
        return Err(dim_err(format!(
            "resize backward: upstream {:?} for input {:?} at scale {scale}",
            upstream.shape(),
            input_shape
        )));
    }
    if scale == 1 {
        return Ok(upstream.clone());
    }
    let mut grad = Grid::zeros(h, w, ch);
    if h == 0 || w == 0 {
        return Ok(grad);
    }
    let ty = resize_taps(h, scale);
    let tx = resize_taps(w, scale);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            for c in 0..ch {
                let g = upstream.get(oy, ox, c);
                grad.add_at(y0, x0, c, (1.0 - fy) * (1.0 - fx) * g);
                grad.add_at(y0, x1, c, (1.0 - fy) * fx * g);
                grad.add_at(y1, x0, c, fy * (1.0 - fx) * g);
                grad.add_at(y1, x1, c, fy * fx * g);
            }
        }
    }
    Ok(grad)
}

/// Mean over non-overlapping `factor × factor` blocks. Plane dimensions must
/// be multiples of `factor`.
pub fn box_downsample(input: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 {
        return Err(Error::Argument("downsample factor must be >= 1".into()));
    }
    let (h, w, ch) = input.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(dim_err(format!(
            "{h}x{w} is not divisible by downsample factor {factor}"
        )));
    }
    let norm = 1.0 / (factor * factor) as f64;
    Ok(Grid::from_fn(h / factor, w / factor, ch, |y, x, c| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += input.get(y * factor + dy, x * factor + dx, c);
            }
        }
        acc * norm
    }))
}
