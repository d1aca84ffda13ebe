//! Dense rank-3 tensors, spatial maps and binary masks, plus the image and
//! feature operations the rest of the crate is built on.
//!
//! Layout is always channel-major, then row, then column.

use crate::error::{AcatError, Result};

/// A `channels × height × width` block of finite reals: a layer's features
/// or an input image.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ActivationTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(AcatError::config(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(AcatError::Domain(format!(
                "non-finite tensor value at flat index {pos}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

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
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Construction from already-validated kernel output.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
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

    /// `(channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, value: f64) {
        self.data[(c * self.height + i) * self.width + j] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Elementwise clamp into `[lo, hi]`.
    pub fn clamp(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// Multiplies every element of channel `c` by `weights[c]`.
    pub fn scale_channels(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.channels {
            return Err(AcatError::config(format!(
                "{} channel weights for a {}-channel tensor",
                weights.len(),
                self.channels
            )));
        }
        let n = self.plane_len();
        let mut out = self.clone();
        for (c, w) in weights.iter().enumerate() {
            for v in &mut out.data[c * n..(c + 1) * n] {
                *v *= w;
            }
        }
        Ok(out)
    }

    fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(AcatError::config(format!(
                "tensor dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// `a·self + b·other`
    pub fn axpby(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.check_same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self::from_raw(self.channels, self.height, self.width, data))
    }
}

/// A single-channel real map over a layer's spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(AcatError::config(format!(
                "heatmap data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AcatError::Domain("non-finite heatmap value".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// An `H × W` map of exact zeros and ones.
///
/// Defense masks follow the convention 0 = adversarial, 1 = clean. The
/// complement flips it into an adversarial indicator (1 = adversarial), which
/// is what [`expand_mask`] and the Mask-IoU metric consume.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(AcatError::config(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(AcatError::Domain(format!(
                "mask value {} at flat index {pos} is not 0 or 1",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(u8::from(f(i, j)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.data[i * self.width + j] = u8::from(value);
    }

    /// `1 − M`
    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn count_zeros(&self) -> usize {
        self.data.len() - self.count_ones()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }
}

/// Weights of a 2-D convolution, `[out_c × in_c × kh × kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weights: Vec<f64>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != out_channels * in_channels * kernel_h * kernel_w {
            return Err(AcatError::config(format!(
                "kernel has {} weights, expected {}x{}x{}x{}",
                weights.len(),
                out_channels,
                in_channels,
                kernel_h,
                kernel_w
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
        })
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx]
    }
}

/// Output extent of a strided, zero-padded convolution, or `None` when the
/// kernel does not fit.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `ox` for which `ox·stride + k − pad` lands inside
/// `[0, len)`.
#[inline]
pub(crate) fn valid_out_range(
    len: usize,
    out_len: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        (len + pad - k).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Raw strided cross-correlation over flat buffers; `out` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_raw(
    input: &[f64],
    (in_c, h, w): (usize, usize, usize),
    kernel: &ConvKernel,
    bias: &[f64],
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    let (kh, kw) = (kernel.kernel_h, kernel.kernel_w);
    let plane = oh * ow;
    for oc in 0..kernel.out_channels {
        let out_plane = &mut out[oc * plane..(oc + 1) * plane];
        out_plane.fill(bias[oc]);
        for ic in 0..in_c {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, pad);
                for kx in 0..kw {
                    let wv = kernel.at(oc, ic, ky, kx);
                    let (ox_lo, ox_hi) = valid_out_range(w, ow, kx, stride, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            for (o, x) in out_row[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&in_row[ix0..ix0 + n])
                            {
                                *o += wv * x;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * in_row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Standard zero-padded, strided cross-correlation.
pub fn conv2d(
    input: &ActivationTensor,
    kernel: &ConvKernel,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<ActivationTensor> {
    if kernel.in_channels != input.channels {
        return Err(AcatError::config(format!(
            "kernel expects {} input channels, tensor has {}",
            kernel.in_channels, input.channels
        )));
    }
    if bias.len() != kernel.out_channels {
        return Err(AcatError::config(format!(
            "{} biases for {} output channels",
            bias.len(),
            kernel.out_channels
        )));
    }
    if stride == 0 {
        return Err(AcatError::config("stride must be at least 1"));
    }
    let oh = conv_output_dim(input.height, kernel.kernel_h, stride, padding);
    let ow = conv_output_dim(input.width, kernel.kernel_w, stride, padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(AcatError::config(format!(
            "{}x{} kernel does not fit a {}x{} input with padding {}",
            kernel.kernel_h, kernel.kernel_w, input.height, input.width, padding
        )));
    };
    let mut out = vec![0.0; kernel.out_channels * oh * ow];
    conv2d_raw(
        &input.data,
        input.dims(),
        kernel,
        bias,
        stride,
        padding,
        (oh, ow),
        &mut out,
    );
    Ok(ActivationTensor::from_raw(kernel.out_channels, oh, ow, out))
}

fn check_odd_kernel(kernel_size: usize, what: &str) -> Result<()> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(AcatError::config(format!(
            "{what} kernel size must be odd and at least 1, got {kernel_size}"
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps of odd length `kernel_size`.
pub fn gaussian_kernel_1d(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    check_odd_kernel(kernel_size, "gaussian")?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(AcatError::Domain(format!("gaussian sigma {sigma} must be positive")));
    }
    let r = (kernel_size / 2) as f64;
    let taps: Vec<f64> = (0..kernel_size)
        .map(|t| {
            let x = t as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Default Gaussian width for a given support.
pub fn default_gaussian_sigma(kernel_size: usize) -> f64 {
    kernel_size as f64 / 4.0
}

/// Separable Gaussian blur with `σ = kernel_size / 4` and replicate edges.
pub fn gaussian_filter(map: &Heatmap, kernel_size: usize) -> Result<Heatmap> {
    gaussian_filter_with_sigma(map, kernel_size, default_gaussian_sigma(kernel_size))
}

pub fn gaussian_filter_with_sigma(map: &Heatmap, kernel_size: usize, sigma: f64) -> Result<Heatmap> {
    let taps = gaussian_kernel_1d(kernel_size, sigma)?;
    if kernel_size == 1 {
        return Ok(map.clone());
    }
    let (h, w) = map.dims();
    let r = (kernel_size / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut horiz = vec![0.0; h * w];
    for i in 0..h {
        let row = &map.data[i * w..(i + 1) * w];
        for j in 0..w {
            let mut acc = 0.0;
            for (t, tap) in taps.iter().enumerate() {
                acc += tap * row[clamp(j as isize + t as isize - r, w)];
            }
            horiz[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for (t, tap) in taps.iter().enumerate() {
            let src = clamp(i as isize + t as isize - r, h);
            let src_row = &horiz[src * w..(src + 1) * w];
            for (o, x) in out[i * w..(i + 1) * w].iter_mut().zip(src_row) {
                *o += tap * x;
            }
        }
    }
    Ok(Heatmap::from_raw(h, w, out))
}

/// How [`expand_mask`] scales the unit-kernel convolution before binarizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpandMode {
    /// Unnormalized all-ones kernel; at threshold 0.5 this is plain dilation.
    #[default]
    Dilate,
    /// All-ones kernel divided by its area, i.e. a box average.
    Average,
}

/// Grows an adversarial-indicator map (1 = adversarial) by convolving it with
/// a `kernel_size²` unit kernel (zero padding) and keeping pixels whose
/// response exceeds `bin_threshold`. The result marks pixels to exclude.
pub fn expand_mask(
    adversarial_region: &BinaryMask,
    kernel_size: usize,
    bin_threshold: f64,
    mode: ExpandMode,
) -> Result<BinaryMask> {
    check_odd_kernel(kernel_size, "expansion")?;
    let (h, w) = adversarial_region.dims();
    let r = kernel_size / 2;
    let norm = match mode {
        ExpandMode::Dilate => 1.0,
        ExpandMode::Average => (kernel_size * kernel_size) as f64,
    };
    // Box sums through a summed-area table.
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for i in 0..h {
        for j in 0..w {
            sat[(i + 1) * (w + 1) + j + 1] = u32::from(adversarial_region.get(i, j))
                + sat[i * (w + 1) + j + 1]
                + sat[(i + 1) * (w + 1) + j]
                - sat[i * (w + 1) + j];
        }
    }
    Ok(BinaryMask::from_fn(h, w, |i, j| {
        let (y0, y1) = (i.saturating_sub(r), (i + r + 1).min(h));
        let (x0, x1) = (j.saturating_sub(r), (j + r + 1).min(w));
        let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
            - sat[y0 * (w + 1) + x1]
            - sat[y1 * (w + 1) + x0];
        f64::from(s) / norm > bin_threshold
    }))
}

/// Nearest-neighbour resize with `src = floor(dst · src_dim / dst_dim)`.
pub fn resize_mask(mask: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    if target_h == 0 || target_w == 0 {
        return Err(AcatError::config("resize target dims must be at least 1"));
    }
    let (h, w) = mask.dims();
    if (h, w) == (target_h, target_w) {
        return Ok(mask.clone());
    }
    let mut out = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let si = i * h / target_h;
        for j in 0..target_w {
            out.push(mask.get(si, j * w / target_w));
        }
    }
    Ok(BinaryMask {
        height: target_h,
        width: target_w,
        data: out,
    })
}

/// Linear-interpolation percentile: sort ascending, take position
/// `(n − 1)·v / 100` and interpolate between its neighbouring ranks.
pub fn percentile(values: &[f64], v: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(AcatError::Domain("percentile of an empty sequence".into()));
    }
    if !(0.0..=100.0).contains(&v) {
        return Err(AcatError::Domain(format!("percentile rank {v} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p = (sorted.len() - 1) as f64 * v / 100.0;
    let lo = p.floor() as usize;
    let hi = p.ceil() as usize;
    Ok(sorted[lo] + (p - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Hadamard product of every channel with a spatial mask.
pub fn spatial_mask_apply(features: &ActivationTensor, mask: &BinaryMask) -> Result<ActivationTensor> {
    if mask.dims() != (features.height, features.width) {
        return Err(AcatError::config(format!(
            "mask {:?} does not match feature map {}x{}",
            mask.dims(),
            features.height,
            features.width
        )));
    }
    let n = features.plane_len();
    let mut out = features.clone();
    for plane in out.data.chunks_mut(n) {
        for (v, &m) in plane.iter_mut().zip(&mask.data) {
            if m == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
