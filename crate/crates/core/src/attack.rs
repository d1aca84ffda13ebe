//! Adversarial patches: placement on frames, sinusoidal motion across a
//! video, and over-activation-aware EOT crafting.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AcatError, Result};
use crate::net::{softmax_cross_entropy, GradientTape, LossTarget, SlicedNetwork};
use crate::pnm;
use crate::tensor::{resize_mask, ActivationTensor, BinaryMask, LabelMap};

/// A `3 × H̃ × W̃` patch image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPatch {
    pixels: ActivationTensor,
}

impl AdversarialPatch {
    pub fn new(pixels: ActivationTensor) -> Result<Self> {
        if pixels.channels() != 3 || pixels.height() == 0 || pixels.width() == 0 {
            return Err(AcatError::config(format!(
                "patch must be a non-empty 3-channel image, got {:?}",
                pixels.dims()
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(AcatError::Domain("patch values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    /// Uniform noise in `[0, 1]`.
    pub fn random(height: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(ActivationTensor::from_fn(3, height, width, |_, _, _| rng.gen::<f64>()))
    }

    pub fn pixels(&self) -> &ActivationTensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        pnm::write_ppm(path, &self.pixels)
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        Self::new(pnm::read_ppm(path)?)
    }
}

/// Centre and scale of a pasted patch, in frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub x_pos: f64,
    pub y_pos: f64,
    pub scale: f64,
}

/// Parameters of the sinusoidal patch motion
/// `x = c_x + A_x sin(α_x k + ω_x)`, same for `y`, and
/// `s = 1 + A_s sin(α_s k + ω_s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    pub amp_x: f64,
    pub amp_y: f64,
    pub amp_s: f64,
    pub freq_x: f64,
    pub freq_y: f64,
    pub freq_s: f64,
    pub phase_x: f64,
    pub phase_y: f64,
    pub phase_s: f64,
    pub center_x: f64,
    pub center_y: f64,
}

/// Reference frame size the default amplitudes are expressed in.
pub const REFERENCE_FRAME: (usize, usize) = (1024, 2048);

impl MotionParams {
    /// Amplitudes (500, 300, 0.3) and angular frequencies 0.05 at 2048×1024,
    /// with the spatial amplitudes rescaled to the given frame size. Phases
    /// are zero and the centre is the frame centre.
    pub fn scaled_defaults(height: usize, width: usize) -> Self {
        Self {
            amp_x: 500.0 * width as f64 / REFERENCE_FRAME.1 as f64,
            amp_y: 300.0 * height as f64 / REFERENCE_FRAME.0 as f64,
            amp_s: 0.3,
            freq_x: 0.05,
            freq_y: 0.05,
            freq_s: 0.05,
            phase_x: 0.0,
            phase_y: 0.0,
            phase_s: 0.0,
            center_x: width as f64 / 2.0,
            center_y: height as f64 / 2.0,
        }
    }

    /// Draws the three phases uniformly from `[0, 2π)`.
    pub fn with_random_phases(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.phase_x = rng.gen_range(0.0..2.0 * PI);
        self.phase_y = rng.gen_range(0.0..2.0 * PI);
        self.phase_s = rng.gen_range(0.0..2.0 * PI);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amp_s.abs() < 1.0) {
            return Err(AcatError::config(format!(
                "scale amplitude {} must be below 1 to keep the scale positive",
                self.amp_s
            )));
        }
        Ok(())
    }
}

/// Placement of the patch at frame `k`.
pub fn patch_trajectory(params: &MotionParams, k: usize) -> Placement {
    let k = k as f64;
    Placement {
        x_pos: params.center_x + params.amp_x * (params.freq_x * k + params.phase_x).sin(),
        y_pos: params.center_y + params.amp_y * (params.freq_y * k + params.phase_y).sin(),
        scale: 1.0 + params.amp_s * (params.freq_s * k + params.phase_s).sin(),
    }
}

/// Uniform centre inside the frame and uniform scale in `scale_range`.
pub fn sample_transform(rng: &mut impl Rng, frame_dims: (usize, usize), scale_range: (f64, f64)) -> Placement {
    let (h, w) = frame_dims;
    let (lo, hi) = scale_range;
    let scale = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    Placement {
        x_pos: rng.gen_range(0.0..w as f64),
        y_pos: rng.gen_range(0.0..h as f64),
        scale,
    }
}

/// Where the scaled patch lands: its size, its top-left corner and the
/// nearest-neighbour source pixel of each scaled pixel.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    top: isize,
    left: isize,
    height: usize,
    width: usize,
}

fn footprint(patch_h: usize, patch_w: usize, placement: &Placement) -> Result<Footprint> {
    if !(placement.scale > 0.0 && placement.scale.is_finite()) {
        return Err(AcatError::Placement(format!("scale {} must be positive", placement.scale)));
    }
    let height = ((placement.scale * patch_h as f64).round() as usize).max(1);
    let width = ((placement.scale * patch_w as f64).round() as usize).max(1);
    Ok(Footprint {
        top: (placement.y_pos - height as f64 / 2.0).round() as isize,
        left: (placement.x_pos - width as f64 / 2.0).round() as isize,
        height,
        width,
    })
}

/// Visits every in-frame pixel covered by the patch as
/// `(frame_i, frame_j, patch_i, patch_j)`.
fn for_each_covered(
    frame_h: usize,
    frame_w: usize,
    patch_h: usize,
    patch_w: usize,
    fp: &Footprint,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    for u in 0..fp.height {
        let fi = fp.top + u as isize;
        if fi < 0 || fi >= frame_h as isize {
            continue;
        }
        let pi = u * patch_h / fp.height;
        for v in 0..fp.width {
            let fj = fp.left + v as isize;
            if fj < 0 || fj >= frame_w as isize {
                continue;
            }
            f(fi as usize, fj as usize, pi, v * patch_w / fp.width);
        }
    }
}

/// Occludes `frame` with the nearest-neighbour-scaled patch centred at the
/// placement, cropping at the borders. Returns the attacked frame and the
/// ground-truth adversarial indicator (1 exactly at covered pixels).
pub fn paste_patch(
    frame: &ActivationTensor,
    patch: &AdversarialPatch,
    placement: &Placement,
) -> Result<(ActivationTensor, BinaryMask)> {
    if frame.channels() != 3 {
        return Err(AcatError::config("frames must have 3 channels"));
    }
    let (h, w) = (frame.height(), frame.width());
    let fp = footprint(patch.height(), patch.width(), placement)?;
    let mut out = frame.clone();
    let mut covered = BinaryMask::zeros(h, w);
    let mut any = false;
    for_each_covered(h, w, patch.height(), patch.width(), &fp, |fi, fj, pi, pj| {
        any = true;
        covered.set(fi, fj, true);
        for c in 0..3 {
            out.set(c, fi, fj, patch.pixels.get(c, pi, pj));
        }
    });
    if !any {
        return Err(AcatError::Placement(format!(
            "patch at ({:.1}, {:.1}) scale {:.3} does not intersect the {h}x{w} frame",
            placement.x_pos, placement.y_pos, placement.scale
        )));
    }
    Ok((out, covered))
}

/// Sums frame-space gradients back onto the patch pixels they came from.
fn gather_patch_grad(
    frame_grad: &ActivationTensor,
    patch: &AdversarialPatch,
    placement: &Placement,
    acc: &mut ActivationTensor,
) -> Result<()> {
    let (h, w) = (frame_grad.height(), frame_grad.width());
    let fp = footprint(patch.height(), patch.width(), placement)?;
    for_each_covered(h, w, patch.height(), patch.width(), &fp, |fi, fj, pi, pj| {
        for c in 0..3 {
            let v = acc.get(c, pi, pj) + frame_grad.get(c, fi, fj);
            acc.set(c, pi, pj, v);
        }
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackTarget {
    /// Push every pixel away from its true class.
    Untargeted,
    /// Pull every pixel toward one class.
    Targeted(usize),
}

/// Pixels the adversarial cross-entropy is summed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossRegion {
    /// Every pixel, including the ones under the patch.
    Frame,
    /// Only pixels the patch leaves visible.
    Outside,
}

impl LossRegion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(Self::Frame),
            "outside" => Ok(Self::Outside),
            _ => Err(AcatError::config(format!("loss region must be frame or outside, got {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Frame => "frame",
            Self::Outside => "outside",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Weight of the adversarial loss; `1 − beta` weighs over-activation.
    pub beta: f64,
    pub steps: usize,
    pub step_size: f64,
    pub monitored_layers: Vec<usize>,
    pub target: AttackTarget,
    pub eot_samples_per_step: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub scale_range: (f64, f64),
    pub loss_region: LossRegion,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            steps: 200,
            step_size: 2.0 / 255.0,
            monitored_layers: vec![1],
            target: AttackTarget::Untargeted,
            eot_samples_per_step: 4,
            patch_height: 16,
            patch_width: 16,
            scale_range: (0.8, 1.2),
            loss_region: LossRegion::Frame,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, net: &SlicedNetwork) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(AcatError::config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.eot_samples_per_step == 0 || self.patch_height == 0 || self.patch_width == 0 {
            return Err(AcatError::config("EOT samples and patch dims must be at least 1"));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(AcatError::config("step size must be finite and non-negative"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(AcatError::config(format!("scale range ({lo}, {hi}) is invalid")));
        }
        if let Some(&l) = self.monitored_layers.iter().find(|&&l| l == 0 || l >= net.num_layers()) {
            return Err(AcatError::config(format!("monitored layer {l} is not an inner layer")));
        }
        if let AttackTarget::Targeted(t) = self.target {
            if t >= net.class_count() {
                return Err(AcatError::config(format!("target class {t} out of range")));
            }
        }
        Ok(())
    }

    /// Key=value rendering used by the patch sidecar file.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("beta".into(), self.beta.to_string());
        m.insert("steps".into(), self.steps.to_string());
        m.insert("step_size".into(), self.step_size.to_string());
        m.insert(
            "monitored_layers".into(),
            self.monitored_layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        m.insert(
            "target".into(),
            match self.target {
                AttackTarget::Untargeted => "untargeted".into(),
                AttackTarget::Targeted(t) => t.to_string(),
            },
        );
        m.insert("eot_samples".into(), self.eot_samples_per_step.to_string());
        m.insert("patch_height".into(), self.patch_height.to_string());
        m.insert("patch_width".into(), self.patch_width.to_string());
        m.insert("scale_min".into(), self.scale_range.0.to_string());
        m.insert("scale_max".into(), self.scale_range.1.to_string());
        m.insert("loss_region".into(), self.loss_region.as_str().into());
        m
    }
}

/// Losses of one attacked frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLosses {
    /// The adversarial loss (lower = stronger attack).
    pub adversarial: f64,
    /// Mean squared activation over patch-covered positions, averaged over the
    /// monitored layers.
    pub activation: f64,
}

/// Adversarial loss: per-pixel cross-entropy summed over `region`, divided
/// by the covered pixel count so that it is on the same per-patch-pixel
/// footing as the activation term.
fn adversarial_loss(
    logits: &ActivationTensor,
    labels: &LabelMap,
    covered: &BinaryMask,
    target: AttackTarget,
    region: LossRegion,
) -> Result<(f64, ActivationTensor)> {
    let outside = covered.complement();
    let include = match region {
        LossRegion::Frame => None,
        LossRegion::Outside => Some(&outside),
    };
    let (sign, ce) = match target {
        AttackTarget::Untargeted => (-1.0, softmax_cross_entropy(logits, LossTarget::Labels(labels), include)?),
        AttackTarget::Targeted(t) => (1.0, softmax_cross_entropy(logits, LossTarget::Uniform(t), include)?),
    };
    let scale = sign * ce.pixels as f64 / covered.count_ones().max(1) as f64;
    let mut grad = ce.grad;
    for v in grad.data_mut() {
        *v *= scale;
    }
    Ok((ce.loss * scale, grad))
}

/// Mean squared activation over the covered positions of `h` and its gradient.
fn activation_energy(h: &ActivationTensor, covered: &BinaryMask) -> Result<(f64, ActivationTensor)> {
    let region = resize_mask(covered, h.height(), h.width())?;
    let n = region.count_ones() * h.channels();
    let mut grad = ActivationTensor::zeros(h.channels(), h.height(), h.width());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let plane = h.plane_len();
    let mut total = 0.0;
    for c in 0..h.channels() {
        let src = h.channel(c);
        let dst = &mut grad.data_mut()[c * plane..(c + 1) * plane];
        for (p, &m) in region.data().iter().enumerate() {
            if m == 1 {
                total += src[p] * src[p];
                dst[p] = 2.0 * src[p] / n as f64;
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// Evaluates both attack losses on one frame without gradients.
pub fn frame_losses(
    net: &SlicedNetwork,
    frame: &ActivationTensor,
    labels: &LabelMap,
    patch: &AdversarialPatch,
    placement: &Placement,
    cfg: &AttackConfig,
) -> Result<FrameLosses> {
    let monitored_layers = &cfg.monitored_layers;
    let (attacked, covered) = paste_patch(frame, patch, placement)?;
    let mut tape = GradientTape::input_only();
    let logits = net.forward_recorded(&attacked, 0, net.num_layers(), &mut tape)?;
    let (adversarial, _) = adversarial_loss(&logits, labels, &covered, cfg.target, cfg.loss_region)?;
    let mut activation = 0.0;
    for &l in monitored_layers.iter() {
        let h = tape
            .activation(l)
            .ok_or_else(|| AcatError::config(format!("layer {l} not recorded")))?;
        activation += activation_energy(h, &covered)?.0;
    }
    if !monitored_layers.is_empty() {
        activation /= monitored_layers.len() as f64;
    }
    Ok(FrameLosses {
        adversarial,
        activation,
    })
}

/// `β·L_adv + (1 − β)·L_act` for one (frame, placement) draw; when `acc` is
/// given the gradient with respect to the patch pixels is added to it.
pub fn total_loss_grad(
    net: &SlicedNetwork,
    frame: &ActivationTensor,
    labels: &LabelMap,
    patch: &AdversarialPatch,
    placement: &Placement,
    cfg: &AttackConfig,
    acc: Option<&mut ActivationTensor>,
) -> Result<f64> {
    let (attacked, covered) = paste_patch(frame, patch, placement)?;
    let mut tape = GradientTape::input_only();
    let logits = net.forward_recorded(&attacked, 0, net.num_layers(), &mut tape)?;
    let (adv, mut loss_grad) = adversarial_loss(&logits, labels, &covered, cfg.target, cfg.loss_region)?;
    for v in loss_grad.data_mut() {
        *v *= cfg.beta;
    }
    let mut total = cfg.beta * adv;
    let act_weight = (1.0 - cfg.beta) / cfg.monitored_layers.len().max(1) as f64;
    let mut taps = Vec::new();
    if act_weight > 0.0 {
        for &l in &cfg.monitored_layers {
            let h = tape
                .activation(l)
                .ok_or_else(|| AcatError::config(format!("layer {l} not recorded")))?;
            let (e, mut g) = activation_energy(h, &covered)?;
            total += act_weight * e;
            for v in g.data_mut() {
                *v *= act_weight;
            }
            taps.push((l, g));
        }
    }
    if let Some(acc) = acc {
        if total.is_finite() {
            let tap_refs: Vec<(usize, &ActivationTensor)> = taps.iter().map(|(l, g)| (*l, g)).collect();
            net.backward(&mut tape, &loss_grad, &tap_refs)?;
            let frame_grad = tape.input_grad().expect("backward sets the input gradient");
            gather_patch_grad(frame_grad, patch, placement, acc)?;
        }
    }
    Ok(total)
}

/// Crafts a patch from seeded uniform noise; see [`optimize_patch_from`].
pub fn optimize_patch(
    net: &SlicedNetwork,
    images: &[(ActivationTensor, LabelMap)],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AdversarialPatch> {
    let init = AdversarialPatch::random(cfg.patch_height, cfg.patch_width, seed ^ 0x9a7c_4000)?;
    optimize_patch_from(net, images, cfg, seed, init)
}

/// Signed-gradient descent on `β·L_adv + (1 − β)·L_act`, each step averaging
/// gradients over `eot_samples_per_step` random (image, placement) draws and
/// clamping the patch to `[0, 1]` afterwards.
pub fn optimize_patch_from(
    net: &SlicedNetwork,
    images: &[(ActivationTensor, LabelMap)],
    cfg: &AttackConfig,
    seed: u64,
    init: AdversarialPatch,
) -> Result<AdversarialPatch> {
    if images.is_empty() {
        return Err(AcatError::config("patch optimization needs at least one image"));
    }
    cfg.validate(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patch = init;
    for step in 0..cfg.steps {
        let mut acc = ActivationTensor::zeros(3, patch.height(), patch.width());
        for _ in 0..cfg.eot_samples_per_step {
            let (frame, labels) = &images[rng.gen_range(0..images.len())];
            let placement = sample_transform(&mut rng, (frame.height(), frame.width()), cfg.scale_range);
            let total = total_loss_grad(net, frame, labels, &patch, &placement, cfg, Some(&mut acc))?;
            if !total.is_finite() {
                return Err(AcatError::Attack(format!("non-finite loss {total} at step {step}")));
            }
        }
        let mut pixels = patch.pixels.clone();
        for (p, g) in pixels.data_mut().iter_mut().zip(acc.data()) {
            if !g.is_finite() {
                return Err(AcatError::Attack(format!("non-finite gradient at step {step}")));
            }
            *p = (*p - cfg.step_size * g.signum() * f64::from(u8::from(*g != 0.0))).clamp(0.0, 1.0);
        }
        patch = AdversarialPatch { pixels };
    }
    Ok(patch)
}

/// Writes `key=value` lines sorted by key.
pub fn write_kv_file(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k}={v}");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Saves `patch.ppm`-style image plus a `.txt` sidecar with its base dims and
/// crafting config.
pub fn save_patch(path: &Path, patch: &AdversarialPatch, cfg: &AttackConfig, seed: u64) -> Result<()> {
    patch.save_ppm(path)?;
    let mut kv = cfg.to_kv();
    kv.insert("base_height".into(), patch.height().to_string());
    kv.insert("base_width".into(), patch.width().to_string());
    kv.insert("seed".into(), seed.to_string());
    write_kv_file(&path.with_extension("txt"), &kv)
}
