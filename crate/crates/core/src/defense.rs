//! Attention heatmaps over a monitored layer, the per-channel adversarial
//! trace, the adaptive threshold and the masking of intermediate features.
//!
//! Masks follow the defense convention: 1 = clean, 0 = adversarial.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{AcatError, Result};
use crate::net::SlicedNetwork;
use crate::tensor::{
    expand_mask, gaussian_filter, percentile, resize_mask, spatial_mask_apply, ActivationTensor, BinaryMask,
    ExpandMode, Heatmap,
};

/// Per-channel attention weights, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialTrace {
    weights: Vec<f64>,
}

impl AdversarialTrace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(AcatError::config("trace needs at least one channel"));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(AcatError::Domain(format!("trace weight {w} outside [0, 1]")));
        }
        Ok(Self { weights })
    }

    pub fn ones(channels: usize) -> Self {
        Self {
            weights: vec![1.0; channels],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// One weight per line, shortest round-trip representation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.weights {
            let _ = writeln!(s, "{w}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut weights = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let t = line.trim();
            if !t.is_empty() {
                weights.push(
                    t.parse::<f64>()
                        .map_err(|e| AcatError::format(offset, format!("bad trace weight {t:?}: {e}")))?,
                );
            }
            offset += line.len() as u64 + 1;
        }
        Self::new(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// The four ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DefenseFlags {
    /// Attention toward channels over-activated inside the adversarial region.
    pub att_plus: bool,
    /// Attention away from channels active on the clean region.
    pub att_minus: bool,
    /// Periodic trace and threshold updates.
    pub upd: bool,
    /// Gaussian noise filtering of the heatmap.
    pub nf: bool,
}

impl DefenseFlags {
    pub const ALL: Self = Self {
        att_plus: true,
        att_minus: true,
        upd: true,
        nf: true,
    };
    pub const NONE: Self = Self {
        att_plus: false,
        att_minus: false,
        upd: false,
        nf: false,
    };

    /// Parses a comma list of `att+`, `att-`, `upd`, `nf`; `all` and `none`
    /// (or an empty string) are shorthands.
    pub fn parse(list: &str) -> Result<Self> {
        let mut f = Self::NONE;
        for tok in list.split([',', '|']).map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "att+" => f.att_plus = true,
                "att-" => f.att_minus = true,
                "upd" => f.upd = true,
                "nf" => f.nf = true,
                "all" => f = Self::ALL,
                "none" => {}
                other => return Err(AcatError::config(format!("unknown defense flag {other:?}"))),
            }
        }
        Ok(f)
    }

    /// Canonical list with `|` separators, safe inside a CSV field.
    pub fn csv_label(&self) -> String {
        self.label().replace(',', "|")
    }

    /// Canonical comma list, `none` when every flag is off.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.att_plus, "att+"),
            (self.att_minus, "att-"),
            (self.upd, "upd"),
            (self.nf, "nf"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

/// Reference point the threshold margin is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginCenter {
    /// 50th percentile; keeps the margin non-negative.
    Median,
    /// Arithmetic mean; the margin goes negative on right-skewed maps.
    Mean,
}

impl MarginCenter {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Self::Median),
            "mean" => Ok(Self::Mean),
            _ => Err(AcatError::config(format!("margin center must be median or mean, got {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Median => "median",
            Self::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseParams {
    pub monitored_layer: usize,
    /// Exponent applied to the trace weights.
    pub tau: f64,
    pub gaussian_kernel: usize,
    pub dilation_kernel: usize,
    /// Percentile used for the threshold margin.
    pub percentile_v: f64,
    pub margin_center: MarginCenter,
    /// Layer whose features are masked; at most `monitored_layer`.
    pub apply_layer: usize,
    pub flags: DefenseFlags,
    /// Frames between trace updates; `None` never updates.
    pub update_period: Option<usize>,
}

impl Default for DefenseParams {
    fn default() -> Self {
        Self {
            monitored_layer: 1,
            tau: 2.0,
            gaussian_kernel: 3,
            dilation_kernel: 5,
            percentile_v: 70.0,
            margin_center: MarginCenter::Median,
            apply_layer: 1,
            flags: DefenseFlags::ALL,
            update_period: Some(1),
        }
    }
}

impl DefenseParams {
    /// Defaults monitoring (and masking at) layer `l`.
    pub fn at_layer(l: usize) -> Self {
        Self {
            monitored_layer: l,
            apply_layer: l,
            ..Self::default()
        }
    }

    pub fn validate(&self, net: &SlicedNetwork) -> Result<()> {
        let n = net.num_layers();
        if self.monitored_layer == 0 || self.monitored_layer >= n {
            return Err(AcatError::config(format!(
                "monitored layer {} must be in 1..{n}",
                self.monitored_layer
            )));
        }
        if self.apply_layer > self.monitored_layer {
            return Err(AcatError::config(format!(
                "apply layer {} exceeds monitored layer {}",
                self.apply_layer, self.monitored_layer
            )));
        }
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(AcatError::config(format!("tau {} must be finite and >= 1", self.tau)));
        }
        for (name, k) in [("gaussian", self.gaussian_kernel), ("dilation", self.dilation_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(AcatError::config(format!("{name} kernel {k} must be odd")));
            }
        }
        if !(0.0..=100.0).contains(&self.percentile_v) {
            return Err(AcatError::config(format!("percentile {} outside [0, 100]", self.percentile_v)));
        }
        if self.update_period == Some(0) {
            return Err(AcatError::config("update period must be at least 1"));
        }
        Ok(())
    }
}

/// The adaptive threshold on heatmap values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdState {
    pub xi: f64,
}

/// `H = Σ_c σ_c^τ h_c`, optionally Gaussian-filtered. With both attention
/// flags off every weight is 1.
pub fn compute_heatmap(h: &ActivationTensor, trace: &AdversarialTrace, params: &DefenseParams) -> Result<Heatmap> {
    if trace.len() != h.channels() {
        return Err(AcatError::config(format!(
            "trace has {} weights, activation has {} channels",
            trace.len(),
            h.channels()
        )));
    }
    let attention = params.flags.att_plus || params.flags.att_minus;
    let plane = h.plane_len();
    let mut acc = vec![0.0; plane];
    for (c, &s) in trace.weights().iter().enumerate() {
        let w = if attention { s.powf(params.tau) } else { 1.0 };
        if w == 0.0 {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(h.channel(c)) {
            *a += w * v;
        }
    }
    let map = Heatmap::from_raw(h.height(), h.width(), acc);
    if params.flags.nf {
        gaussian_filter(&map, params.gaussian_kernel)
    } else {
        Ok(map)
    }
}

/// 0 where the heatmap strictly exceeds `xi`.
pub fn binarize(map: &Heatmap, xi: f64) -> BinaryMask {
    BinaryMask::from_fn(map.height(), map.width(), |i, j| map.get(i, j) <= xi)
}

/// Attention weights from the contrast between the adversarial (mask 0)
/// and clean (mask 1) regions, passed through ReLU and min-max normalised
/// across channels.
pub fn update_trace(h: &ActivationTensor, mask: &BinaryMask, flags: &DefenseFlags) -> Result<AdversarialTrace> {
    if mask.dims() != (h.height(), h.width()) {
        return Err(AcatError::config(format!(
            "mask {:?} vs activation {}x{}",
            mask.dims(),
            h.height(),
            h.width()
        )));
    }
    let n_adv = mask.count_zeros();
    let n_clean = mask.count_ones();
    if n_adv == 0 || n_clean == 0 {
        return Err(AcatError::DegenerateMask(format!(
            "{n_adv} adversarial and {n_clean} clean pixels"
        )));
    }
    let d: Vec<f64> = (0..h.channels())
        .map(|c| {
            let (mut adv, mut clean) = (0.0, 0.0);
            for (v, &m) in h.channel(c).iter().zip(mask.data()) {
                if m == 0 {
                    adv += v;
                } else {
                    clean += v;
                }
            }
            let plus = if flags.att_plus { adv / n_adv as f64 } else { 0.0 };
            let minus = if flags.att_minus { clean / n_clean as f64 } else { 0.0 };
            (plus - minus).max(0.0)
        })
        .collect();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = if hi == lo {
        vec![if hi > 0.0 { 1.0 } else { 0.0 }; d.len()]
    } else {
        d.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    AdversarialTrace::new(weights)
}

/// `ξ = max(clean) + (p_v(clean) − center(clean))` over heatmap values outside
/// the dilated adversarial region. `None` when dilation leaves no clean pixel;
/// the caller keeps its previous threshold.
pub fn update_threshold(map: &Heatmap, mask: &BinaryMask, params: &DefenseParams) -> Result<Option<ThresholdState>> {
    if mask.dims() != map.dims() {
        return Err(AcatError::config("mask and heatmap dims differ"));
    }
    let excluded = expand_mask(&mask.complement(), params.dilation_kernel, 0.5, ExpandMode::Dilate)?;
    let clean: Vec<f64> = map
        .data()
        .iter()
        .zip(excluded.data())
        .filter(|(_, &e)| e == 0)
        .map(|(v, _)| *v)
        .collect();
    if clean.is_empty() {
        return Ok(None);
    }
    let max = clean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let center = match params.margin_center {
        MarginCenter::Median => percentile(&clean, 50.0)?,
        MarginCenter::Mean => clean.iter().sum::<f64>() / clean.len() as f64,
    };
    let p = percentile(&clean, params.percentile_v)?;
    Ok(Some(ThresholdState { xi: max + (p - center) }))
}

/// Masks features at layer `z` with a layer-`l` mask and runs the rest of
/// the network.
pub fn apply_defense_mask(
    net: &SlicedNetwork,
    prefix_features: &ActivationTensor,
    mask: &BinaryMask,
    z: usize,
    l: usize,
) -> Result<ActivationTensor> {
    if z > l {
        return Err(AcatError::config(format!("apply layer {z} exceeds monitored layer {l}")));
    }
    let (fh, fw) = (prefix_features.height(), prefix_features.width());
    let masked = if mask.dims() == (fh, fw) {
        spatial_mask_apply(prefix_features, mask)?
    } else if z == l {
        return Err(AcatError::config(format!(
            "mask {:?} does not match layer {l} features {fh}x{fw}",
            mask.dims()
        )));
    } else {
        spatial_mask_apply(prefix_features, &resize_mask(mask, fh, fw)?)?
    };
    net.forward_slice(&masked, z, net.num_layers())
}

/// Per-frame maxima of the channel-sum heatmap at a deep layer on clean
/// frames, and the margin the static threshold is scaled by.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub deep_layer: usize,
    pub maxima: Vec<f64>,
    pub margin: f64,
}

impl CalibrationRecord {
    pub const DEFAULT_MARGIN: f64 = 1.1;
    pub const DEFAULT_DEEP_LAYER: usize = 3;

    pub fn calibrate(net: &SlicedNetwork, frames: &[ActivationTensor], deep_layer: usize, margin: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(AcatError::config("calibration needs at least one clean frame"));
        }
        if deep_layer == 0 || deep_layer >= net.num_layers() {
            return Err(AcatError::config(format!("deep layer {deep_layer} out of range")));
        }
        let maxima = frames
            .iter()
            .map(|f| Ok(channel_sum(&net.forward_slice(f, 0, deep_layer)?).max()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            deep_layer,
            maxima,
            margin,
        })
    }

    /// `max(maxima) × margin`.
    pub fn threshold(&self) -> Result<f64> {
        if self.maxima.is_empty() {
            return Err(AcatError::config("empty calibration record"));
        }
        Ok(self.maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max) * self.margin)
    }
}

/// Unweighted channel sum.
pub fn channel_sum(h: &ActivationTensor) -> Heatmap {
    let mut acc = vec![0.0; h.plane_len()];
    for c in 0..h.channels() {
        for (a, v) in acc.iter_mut().zip(h.channel(c)) {
            *a += v;
        }
    }
    Heatmap::from_raw(h.height(), h.width(), acc)
}

/// Detection from an already computed deep-layer activation: pixels whose
/// channel sum exceeds the calibrated threshold become adversarial, and the
/// mask is resized to `mask_dims`.
pub fn detect_from_activation(
    deep: &ActivationTensor,
    calib: &CalibrationRecord,
    mask_dims: (usize, usize),
) -> Result<Option<BinaryMask>> {
    let xi = calib.threshold()?;
    let mask = binarize(&channel_sum(deep), xi);
    if mask.count_zeros() == 0 {
        return Ok(None);
    }
    Ok(Some(resize_mask(&mask, mask_dims.0, mask_dims.1)?))
}

/// Stand-in single-frame detector: one full forward pass, a static threshold
/// on the deep-layer channel sum, and a mask at the dims of `mask_layer`.
pub fn baseline_detect(
    net: &SlicedNetwork,
    frame: &ActivationTensor,
    calib: &CalibrationRecord,
    mask_layer: usize,
) -> Result<Option<BinaryMask>> {
    let dims = net.check_frame_dims(frame.height(), frame.width())?;
    let (_, mh, mw) = *dims
        .get(mask_layer)
        .ok_or_else(|| AcatError::config(format!("mask layer {mask_layer} out of range")))?;
    let deep = net.forward_slice(frame, 0, calib.deep_layer)?;
    net.forward_slice(&deep, calib.deep_layer, net.num_layers())?;
    detect_from_activation(&deep, calib, (mh, mw))
}
