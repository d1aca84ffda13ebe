//! A small feed-forward CNN that can be run in slices `f^{i→j}`, with
//! activation recording and reverse-mode gradients.
//!
//! Layer `j` (1-based) maps `h^{j-1}` to `h^j`; `h^0` is the input image. A
//! slice `(from, to)` applies layers `from+1 ..= to`.

mod loss;
mod train;
mod weights;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AcatError, Result};
use crate::tensor::{conv2d_raw, conv_output_dim, valid_out_range, ActivationTensor, ConvKernel};

pub use loss::{argmax_labels, softmax_cross_entropy, CrossEntropy, LossTarget};
pub use train::{pixel_accuracy, train_toy_model, TrainConfig, TrainOutcome};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, WEIGHTS_MAGIC};

/// One differentiable stage of the network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Zero-padded strided convolution with bias, optionally followed by ReLU.
    Conv {
        kernel: ConvKernel,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    /// Bilinear upsampling by an integer factor (align-corners false).
    Upsample { factor: usize },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { relu: true, .. } => "conv+relu",
            Layer::Conv { relu: false, .. } => "conv",
            Layer::Upsample { .. } => "upsample",
        }
    }

    /// Output dims for an input of `(c, h, w)`.
    pub fn output_dims(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match self {
            Layer::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                if kernel.in_channels != c {
                    return Err(AcatError::config(format!(
                        "conv expects {} channels, got {c}",
                        kernel.in_channels
                    )));
                }
                let oh = conv_output_dim(h, kernel.kernel_h, *stride, *padding);
                let ow = conv_output_dim(w, kernel.kernel_w, *stride, *padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok((kernel.out_channels, oh, ow)),
                    _ => Err(AcatError::config(format!(
                        "conv kernel does not fit a {h}x{w} input"
                    ))),
                }
            }
            Layer::Upsample { factor } => Ok((c, h * factor, w * factor)),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv { kernel, bias, .. } => kernel.weights.len() + bias.len(),
            Layer::Upsample { .. } => 0,
        }
    }

    fn forward(&self, x: &ActivationTensor) -> Result<ActivationTensor> {
        let (oc, oh, ow) = self.output_dims(x.dims())?;
        match self {
            Layer::Conv {
                kernel,
                bias,
                stride,
                padding,
                relu,
            } => {
                let mut out = vec![0.0; oc * oh * ow];
                conv2d_raw(x.data(), x.dims(), kernel, bias, *stride, *padding, (oh, ow), &mut out);
                if *relu {
                    for v in &mut out {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                Ok(ActivationTensor::from_raw(oc, oh, ow, out))
            }
            Layer::Upsample { factor } => Ok(upsample_bilinear(x, *factor)),
        }
    }

    /// Propagates `grad_out` (w.r.t. this layer's output) back to its input,
    /// accumulating parameter gradients into `param_grad` when given.
    fn backward(
        &self,
        input: &ActivationTensor,
        output: &ActivationTensor,
        grad_out: &ActivationTensor,
        param_grad: Option<&mut LayerGrad>,
    ) -> ActivationTensor {
        match self {
            Layer::Conv {
                kernel,
                stride,
                padding,
                relu,
                ..
            } => {
                let mut g = grad_out.clone();
                if *relu {
                    for (gv, &ov) in g.data_mut().iter_mut().zip(output.data()) {
                        if ov <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                if let Some(pg) = param_grad {
                    conv_param_grad(input, &g, kernel, *stride, *padding, pg);
                }
                conv_input_grad(input.dims(), &g, kernel, *stride, *padding)
            }
            Layer::Upsample { factor } => upsample_bilinear_backward(input.dims(), grad_out, *factor),
        }
    }
}

/// Source taps for bilinear resampling along one axis: for each output index,
/// `(lo, hi, weight_hi)`.
fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn upsample_bilinear(x: &ActivationTensor, factor: usize) -> ActivationTensor {
    let (c, h, w) = x.dims();
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.channel(ch);
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    ActivationTensor::from_raw(c, oh, ow, out)
}

fn upsample_bilinear_backward(
    (c, h, w): (usize, usize, usize),
    g: &ActivationTensor,
    factor: usize,
) -> ActivationTensor {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let ow = w * factor;
    let mut out = ActivationTensor::zeros(c, h, w);
    let data = out.data_mut();
    for ch in 0..c {
        let gplane = g.channel(ch);
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = gplane[oy * ow + ox];
                plane[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                plane[y0 * w + x1] += gv * (1.0 - wy) * wx;
                plane[y1 * w + x0] += gv * wy * (1.0 - wx);
                plane[y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    out
}

fn conv_input_grad(
    (in_c, h, w): (usize, usize, usize),
    g: &ActivationTensor,
    kernel: &ConvKernel,
    stride: usize,
    pad: usize,
) -> ActivationTensor {
    let (_, oh, ow) = g.dims();
    let mut out = ActivationTensor::zeros(in_c, h, w);
    let data = out.data_mut();
    for oc in 0..kernel.out_channels {
        let gplane = g.channel(oc);
        for ic in 0..in_c {
            let plane = &mut data[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kernel.kernel_h {
                let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, pad);
                for kx in 0..kernel.kernel_w {
                    let wv = kernel.at(oc, ic, ky, kx);
                    let (ox_lo, ox_hi) = valid_out_range(w, ow, kx, stride, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let row = &mut plane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            for (r, gv) in row[ix0..ix0 + n].iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                *r += wv * gv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_param_grad(
    input: &ActivationTensor,
    g: &ActivationTensor,
    kernel: &ConvKernel,
    stride: usize,
    pad: usize,
    pg: &mut LayerGrad,
) {
    let (in_c, h, w) = input.dims();
    let (_, oh, ow) = g.dims();
    let (kh, kw) = (kernel.kernel_h, kernel.kernel_w);
    for oc in 0..kernel.out_channels {
        let gplane = g.channel(oc);
        pg.bias[oc] += gplane.iter().sum::<f64>();
        for ic in 0..in_c {
            let plane = input.channel(ic);
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, pad);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_out_range(w, ow, kx, stride, pad);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let row = &plane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            acc += row[ix0..ix0 + n]
                                .iter()
                                .zip(&grow[ox_lo..ox_hi])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc += row[ox * stride + kx - pad] * grow[ox];
                            }
                        }
                    }
                    pg.weights[((oc * in_c + ic) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
}

/// Accumulated gradients of one layer's parameters, laid out like the layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_for(layer: &Layer) -> Self {
        match layer {
            Layer::Conv { kernel, bias, .. } => Self {
                weights: vec![0.0; kernel.weights.len()],
                bias: vec![0.0; bias.len()],
            },
            Layer::Upsample { .. } => Self::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct Recording {
    from: usize,
    /// `h^from ..= h^to`
    activations: Vec<ActivationTensor>,
}

/// Records a forward slice and receives the gradients of a later backward
/// pass.
#[derive(Debug, Clone, Default)]
pub struct GradientTape {
    recording: Option<Recording>,
    skip_param_grads: bool,
    input_grad: Option<ActivationTensor>,
    param_grads: Vec<LayerGrad>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Only input gradients are needed (patch optimization): skip the
    /// parameter-gradient accumulation.
    pub fn input_only() -> Self {
        Self {
            skip_param_grads: true,
            ..Self::default()
        }
    }

    pub fn is_recorded(&self) -> bool {
        self.recording.is_some()
    }

    /// Recorded activation `h^layer`, if the slice covered it.
    pub fn activation(&self, layer: usize) -> Option<&ActivationTensor> {
        let rec = self.recording.as_ref()?;
        layer
            .checked_sub(rec.from)
            .and_then(|k| rec.activations.get(k))
    }

    pub fn output(&self) -> Option<&ActivationTensor> {
        self.recording.as_ref().and_then(|r| r.activations.last())
    }

    /// Gradient with respect to the slice input from the latest backward.
    pub fn input_grad(&self) -> Option<&ActivationTensor> {
        self.input_grad.as_ref()
    }

    /// Parameter gradients, accumulated over every backward since the last
    /// [`GradientTape::clear_grads`]. Indexed by layer position (0-based).
    pub fn param_grads(&self) -> &[LayerGrad] {
        &self.param_grads
    }

    pub fn clear_grads(&mut self) {
        self.param_grads.clear();
        self.input_grad = None;
    }
}

/// An ordered list of layers supporting `f^{i→j}`.
#[derive(Debug)]
pub struct SlicedNetwork {
    layers: Vec<Layer>,
    in_channels: usize,
    class_count: usize,
    exec_counts: Vec<AtomicU64>,
}

impl Clone for SlicedNetwork {
    /// Clones parameters; execution counters start from zero.
    fn clone(&self) -> Self {
        Self::from_parts(self.layers.clone(), self.in_channels, self.class_count)
    }
}

impl PartialEq for SlicedNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl SlicedNetwork {
    fn from_parts(layers: Vec<Layer>, in_channels: usize, class_count: usize) -> Self {
        let exec_counts = (0..layers.len()).map(|_| AtomicU64::new(0)).collect();
        Self {
            layers,
            in_channels,
            class_count,
            exec_counts,
        }
    }

    /// Builds a network, checking that consecutive layers agree on channels.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let Some(Layer::Conv { kernel, .. }) = layers.first() else {
            return Err(AcatError::config("network must start with a convolution"));
        };
        let in_channels = kernel.in_channels;
        let mut channels = in_channels;
        for (idx, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Conv {
                    kernel,
                    bias,
                    stride,
                    ..
                } => {
                    if kernel.in_channels != channels {
                        return Err(AcatError::config(format!(
                            "layer {} expects {} channels but receives {channels}",
                            idx + 1,
                            kernel.in_channels
                        )));
                    }
                    if bias.len() != kernel.out_channels || *stride == 0 {
                        return Err(AcatError::config(format!(
                            "layer {} has a malformed bias or zero stride",
                            idx + 1
                        )));
                    }
                    channels = kernel.out_channels;
                }
                Layer::Upsample { factor } => {
                    if *factor == 0 {
                        return Err(AcatError::config("upsample factor must be at least 1"));
                    }
                }
            }
        }
        Ok(Self::from_parts(layers, in_channels, channels))
    }

    /// The toy segmentation architecture:
    /// conv3×3(3→16)+ReLU, conv3×3/2(16→32)+ReLU, conv3×3/2(32→32)+ReLU,
    /// conv1×1(32→classes), bilinear ×4. He-uniform init from `seed`, with
    /// every parameter representable as `f32`.
    pub fn toy(class_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |out_c: usize, in_c: usize, k: usize, stride: usize, relu: bool| {
            let fan_in = (in_c * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weights = (0..out_c * in_c * k * k)
                .map(|_| f64::from(rng.gen_range(-bound..bound) as f32))
                .collect();
            Layer::Conv {
                kernel: ConvKernel {
                    out_channels: out_c,
                    in_channels: in_c,
                    kernel_h: k,
                    kernel_w: k,
                    weights,
                },
                bias: vec![0.0; out_c],
                stride,
                padding: k / 2,
                relu,
            }
        };
        let layers = vec![
            conv(16, 3, 3, 1, true),
            conv(32, 16, 3, 2, true),
            conv(32, 32, 3, 2, true),
            conv(class_count, 32, 1, 1, false),
            Layer::Upsample { factor: 4 },
        ];
        Self::new(layers).expect("toy architecture is consistent")
    }

    /// `N_L`
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Dims of `h^0 ..= h^{N_L}` for an input of the given spatial size.
    pub fn layer_dims(&self, height: usize, width: usize) -> Result<Vec<(usize, usize, usize)>> {
        let mut dims = vec![(self.in_channels, height, width)];
        for layer in &self.layers {
            let next = layer.output_dims(*dims.last().expect("non-empty"))?;
            dims.push(next);
        }
        Ok(dims)
    }

    /// Like [`SlicedNetwork::layer_dims`], but also requires the output grid to
    /// equal the input grid, as per-pixel segmentation needs.
    pub fn check_frame_dims(&self, height: usize, width: usize) -> Result<Vec<(usize, usize, usize)>> {
        let dims = self.layer_dims(height, width)?;
        let (_, oh, ow) = *dims.last().expect("non-empty");
        if (oh, ow) != (height, width) {
            return Err(AcatError::config(format!(
                "a {height}x{width} frame yields a {oh}x{ow} output; frame sides must be multiples of 4"
            )));
        }
        Ok(dims)
    }

    fn check_slice(&self, from: usize, to: usize) -> Result<()> {
        if from > to || to > self.layers.len() {
            return Err(AcatError::config(format!(
                "slice {from}->{to} is invalid for a {}-layer network",
                self.layers.len()
            )));
        }
        Ok(())
    }

    fn run_layer(&self, idx: usize, x: &ActivationTensor) -> Result<ActivationTensor> {
        let out = self.layers[idx].forward(x)?;
        self.exec_counts[idx].fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// `f^{from→to}(input)`.
    pub fn forward_slice(&self, input: &ActivationTensor, from: usize, to: usize) -> Result<ActivationTensor> {
        self.check_slice(from, to)?;
        let mut x = input.clone();
        for idx in from..to {
            x = self.run_layer(idx, &x)?;
        }
        Ok(x)
    }

    /// `f^{0→N_L}(input)`.
    pub fn forward(&self, input: &ActivationTensor) -> Result<ActivationTensor> {
        self.forward_slice(input, 0, self.layers.len())
    }

    /// Runs `f^{from→to}` keeping every intermediate activation in `tape`.
    pub fn forward_recorded(
        &self,
        input: &ActivationTensor,
        from: usize,
        to: usize,
        tape: &mut GradientTape,
    ) -> Result<ActivationTensor> {
        self.check_slice(from, to)?;
        let mut activations = Vec::with_capacity(to - from + 1);
        activations.push(input.clone());
        for idx in from..to {
            let next = self.run_layer(idx, activations.last().expect("non-empty"))?;
            activations.push(next);
        }
        let out = activations.last().expect("non-empty").clone();
        tape.recording = Some(Recording { from, activations });
        tape.input_grad = None;
        Ok(out)
    }

    /// Reverse pass over the recorded slice. `loss_grad` is the gradient with
    /// respect to the slice output; `taps` inject extra gradients with respect
    /// to intermediate activations `h^layer` (for losses defined inside the
    /// network).
    pub fn backward(
        &self,
        tape: &mut GradientTape,
        loss_grad: &ActivationTensor,
        taps: &[(usize, &ActivationTensor)],
    ) -> Result<()> {
        let rec = tape
            .recording
            .as_ref()
            .ok_or_else(|| AcatError::State("backward called without a recorded forward".into()))?;
        let from = rec.from;
        let to = from + rec.activations.len() - 1;
        if loss_grad.dims() != rec.activations[to - from].dims() {
            return Err(AcatError::config(format!(
                "loss gradient dims {:?} do not match the slice output {:?}",
                loss_grad.dims(),
                rec.activations[to - from].dims()
            )));
        }
        for &(layer, g) in taps {
            let Some(act) = layer.checked_sub(from).and_then(|k| rec.activations.get(k)) else {
                return Err(AcatError::config(format!(
                    "gradient tap at layer {layer} is outside the recorded slice {from}->{to}"
                )));
            };
            if act.dims() != g.dims() {
                return Err(AcatError::config(format!("gradient tap at layer {layer} has wrong dims")));
            }
        }
        if !tape.skip_param_grads && tape.param_grads.len() != self.layers.len() {
            tape.param_grads = self.layers.iter().map(LayerGrad::zeros_for).collect();
        }
        let add_taps = |layer: usize, g: &mut ActivationTensor| {
            for &(l, t) in taps {
                if l == layer {
                    for (a, b) in g.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
            }
        };
        let mut grad = loss_grad.clone();
        add_taps(to, &mut grad);
        for idx in (from..to).rev() {
            let input = &rec.activations[idx - from];
            let output = &rec.activations[idx + 1 - from];
            let pg = if tape.skip_param_grads {
                None
            } else {
                Some(&mut tape.param_grads[idx])
            };
            grad = self.layers[idx].backward(input, output, &grad, pg);
            add_taps(idx, &mut grad);
        }
        tape.input_grad = Some(grad);
        Ok(())
    }

    /// Per-layer execution counts since construction or the last reset.
    pub fn execution_counts(&self) -> Vec<u64> {
        self.exec_counts.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_execution_counts(&self) {
        for c in &self.exec_counts {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// Layer executions since the last reset, in units of full forwards.
    pub fn executed_pass_units(&self) -> f64 {
        let total: u64 = self.execution_counts().iter().sum();
        total as f64 / self.layers.len() as f64
    }

    /// Flat parameter vector in declaration order (weights, then bias, per layer).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Conv { kernel, bias, .. } = layer {
                out.extend_from_slice(&kernel.weights);
                out.extend_from_slice(bias);
            }
        }
        out
    }

    /// Rounds every parameter to the nearest `f32`, making the weight file
    /// round trip exact.
    pub fn round_params_to_f32(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Conv { kernel, bias, .. } = layer {
                for v in kernel.weights.iter_mut().chain(bias.iter_mut()) {
                    *v = f64::from(*v as f32);
                }
            }
        }
    }
}
