//! The per-frame defense state machine: detector fallback, trace
//! initialisation, single-pass defended inference, periodic updates and
//! the reset criterion.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;

use crate::defense::{
    apply_defense_mask, compute_heatmap, detect_from_activation, update_threshold, update_trace, AdversarialTrace,
    CalibrationRecord, DefenseParams, ThresholdState,
};
use crate::error::{AcatError, Result};
use crate::eval::mask_iou;
use crate::net::{GradientTape, SlicedNetwork};
use crate::tensor::{resize_mask, ActivationTensor, BinaryMask};

/// Consecutive threshold-stale frames tolerated before a forced reset.
pub const MAX_STALE_FRAMES: usize = 2;

/// What happened on a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameMode {
    /// No trace and the detector found nothing.
    Clean,
    /// The detector fired; the trace was initialised.
    Detected,
    /// The existing trace produced the mask.
    Traced,
    /// The trace was dropped on this frame.
    Reset,
}

impl FrameMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameMode::Clean => "clean",
            FrameMode::Detected => "detected",
            FrameMode::Traced => "traced",
            FrameMode::Reset => "reset",
        }
    }
}

impl fmt::Display for FrameMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    /// Network output (logits) for the frame.
    pub output: ActivationTensor,
    /// Mask applied to the features, at monitored-layer dims.
    pub mask_used: Option<BinaryMask>,
    pub mode: FrameMode,
    /// Layer executions on this frame in units of full forward passes, read
    /// from the network's execution counters.
    pub forward_pass_units: f64,
}

/// The full forward pass run when no trace exists. Its activations are
/// shared with the starting-mask provider so detection costs no extra pass.
pub struct DetectorPass<'a> {
    pub frame_index: usize,
    tape: &'a GradientTape,
}

impl DetectorPass<'_> {
    /// `h^layer` of this frame (layer 0 is the frame itself).
    pub fn activation(&self, layer: usize) -> Option<&ActivationTensor> {
        self.tape.activation(layer)
    }
}

/// Produces the mask that seeds the trace (1 = clean, 0 = adversarial), at
/// any resolution; `None` means no attack was found.
pub trait StartingMaskProvider {
    fn starting_mask(&mut self, pass: &DetectorPass<'_>) -> Result<Option<BinaryMask>>;
}

/// Ground-truth masks, indexed by frame. A frame fires when its mask has an
/// adversarial pixel and, if a frame set is given, its index is listed.
#[derive(Debug, Clone)]
pub struct GtProvider {
    masks: Vec<BinaryMask>,
    only_at: Option<BTreeSet<usize>>,
}

impl GtProvider {
    pub fn new(masks: Vec<BinaryMask>) -> Self {
        Self { masks, only_at: None }
    }

    /// Fires only on the listed frames.
    pub fn only_at(masks: Vec<BinaryMask>, frames: impl IntoIterator<Item = usize>) -> Self {
        Self {
            masks,
            only_at: Some(frames.into_iter().collect()),
        }
    }
}

impl StartingMaskProvider for GtProvider {
    fn starting_mask(&mut self, pass: &DetectorPass<'_>) -> Result<Option<BinaryMask>> {
        let k = pass.frame_index;
        if self.only_at.as_ref().is_some_and(|s| !s.contains(&k)) {
            return Ok(None);
        }
        let m = self
            .masks
            .get(k)
            .ok_or_else(|| AcatError::Data(format!("no ground-truth mask for frame {k}")))?;
        Ok((m.count_zeros() > 0).then(|| m.clone()))
    }
}

/// Channel-sum detector on the calibrated deep layer, reusing the
/// activations of the detector pass.
#[derive(Debug, Clone)]
pub struct BaselineDetector {
    pub calib: CalibrationRecord,
}

impl StartingMaskProvider for BaselineDetector {
    fn starting_mask(&mut self, pass: &DetectorPass<'_>) -> Result<Option<BinaryMask>> {
        let deep = pass
            .activation(self.calib.deep_layer)
            .ok_or_else(|| AcatError::config(format!("layer {} not recorded", self.calib.deep_layer)))?;
        detect_from_activation(deep, &self.calib, (deep.height(), deep.width()))
    }
}

/// Never fires.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoDetector;

impl StartingMaskProvider for NoDetector {
    fn starting_mask(&mut self, _: &DetectorPass<'_>) -> Result<Option<BinaryMask>> {
        Ok(None)
    }
}

/// True when the mask's adversarial pixel count is strictly below `lambda_m`.
pub fn reset_check(mask: &BinaryMask, lambda_m: usize) -> bool {
    mask.count_zeros() < lambda_m
}

/// 1% of the monitored layer's spatial elements, rounded, at least 1.
pub fn default_lambda_m(net: &SlicedNetwork, height: usize, width: usize, layer: usize) -> Result<usize> {
    let dims = net.check_frame_dims(height, width)?;
    let (_, h, w) = *dims
        .get(layer)
        .ok_or_else(|| AcatError::config(format!("layer {layer} out of range")))?;
    Ok(((h * w) as f64 / 100.0).round().max(1.0) as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcatState {
    pub params: DefenseParams,
    pub lambda_m: usize,
    trace: Option<AdversarialTrace>,
    threshold: Option<ThresholdState>,
    /// Traced frames since the trace was initialised.
    frame_counter: usize,
    /// Index of the next frame to process.
    frame_index: usize,
    passes_this_frame: f64,
    stale_count: usize,
    resets: usize,
}

impl AcatState {
    pub fn new(params: DefenseParams, lambda_m: usize) -> Self {
        Self {
            params,
            lambda_m,
            trace: None,
            threshold: None,
            frame_counter: 0,
            frame_index: 0,
            passes_this_frame: 0.0,
            stale_count: 0,
            resets: 0,
        }
    }

    pub fn trace(&self) -> Option<&AdversarialTrace> {
        self.trace.as_ref()
    }

    pub fn threshold(&self) -> Option<ThresholdState> {
        self.threshold
    }

    pub fn frame_counter(&self) -> usize {
        self.frame_counter
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn passes_this_frame(&self) -> f64 {
        self.passes_this_frame
    }

    pub fn stale_count(&self) -> usize {
        self.stale_count
    }

    pub fn resets(&self) -> usize {
        self.resets
    }

    fn clear(&mut self) {
        self.trace = None;
        self.threshold = None;
        self.frame_counter = 0;
        self.stale_count = 0;
        self.resets += 1;
    }

    /// Processes one frame, updating the state in place.
    pub fn process_frame(
        &mut self,
        net: &SlicedNetwork,
        frame: &ActivationTensor,
        detector: &mut dyn StartingMaskProvider,
    ) -> Result<FrameOutcome> {
        self.params.validate(net)?;
        let dims = net.check_frame_dims(frame.height(), frame.width())?;
        let before: u64 = net.execution_counts().iter().sum();
        let (output, mask_used, mode) = match (&self.trace, self.threshold) {
            (Some(trace), Some(threshold)) => {
                let trace = trace.clone();
                self.traced_frame(net, frame, &trace, threshold)?
            }
            _ => self.detector_frame(net, frame, &dims, detector)?,
        };
        let after: u64 = net.execution_counts().iter().sum();
        self.passes_this_frame = (after - before) as f64 / net.num_layers() as f64;
        self.frame_index += 1;
        Ok(FrameOutcome {
            output,
            mask_used,
            mode,
            forward_pass_units: self.passes_this_frame,
        })
    }

    fn detector_frame(
        &mut self,
        net: &SlicedNetwork,
        frame: &ActivationTensor,
        dims: &[(usize, usize, usize)],
        detector: &mut dyn StartingMaskProvider,
    ) -> Result<(ActivationTensor, Option<BinaryMask>, FrameMode)> {
        let (l, z) = (self.params.monitored_layer, self.params.apply_layer);
        let mut tape = GradientTape::input_only();
        let output = net.forward_recorded(frame, 0, net.num_layers(), &mut tape)?;
        let pass = DetectorPass {
            frame_index: self.frame_index,
            tape: &tape,
        };
        let Some(start) = detector.starting_mask(&pass)? else {
            return Ok((output, None, FrameMode::Clean));
        };
        let (_, lh, lw) = dims[l];
        let start = if start.dims() == (lh, lw) {
            start
        } else {
            resize_mask(&start, lh, lw)?
        };
        let h_l = tape.activation(l).expect("full pass records every layer");
        let trace = match update_trace(h_l, &start, &self.params.flags) {
            Ok(t) => t,
            Err(AcatError::DegenerateMask(_)) => return Ok((output, None, FrameMode::Clean)),
            Err(e) => return Err(e),
        };
        let map = compute_heatmap(h_l, &trace, &self.params)?;
        let Some(threshold) = update_threshold(&map, &start, &self.params)? else {
            return Ok((output, None, FrameMode::Clean));
        };
        // Second full pass: prefix up to the apply layer, masked suffix.
        let h_z = net.forward_slice(frame, 0, z)?;
        let defended = apply_defense_mask(net, &h_z, &start, z, l)?;
        self.trace = Some(trace);
        self.threshold = Some(threshold);
        self.frame_counter = 0;
        self.stale_count = 0;
        Ok((defended, Some(start), FrameMode::Detected))
    }

    fn traced_frame(
        &mut self,
        net: &SlicedNetwork,
        frame: &ActivationTensor,
        trace: &AdversarialTrace,
        threshold: ThresholdState,
    ) -> Result<(ActivationTensor, Option<BinaryMask>, FrameMode)> {
        let (l, z, n) = (self.params.monitored_layer, self.params.apply_layer, net.num_layers());
        let mut tape = GradientTape::input_only();
        net.forward_recorded(frame, 0, l, &mut tape)?;
        let h_l = tape.activation(l).expect("prefix records layer l");
        let map = compute_heatmap(h_l, trace, &self.params)?;
        let mask = crate::defense::binarize(&map, threshold.xi);
        if reset_check(&mask, self.lambda_m) {
            self.clear();
            return Ok((net.forward_slice(h_l, l, n)?, None, FrameMode::Reset));
        }
        self.frame_counter += 1;
        let due = self.params.flags.upd && self.params.update_period.is_some_and(|p| self.frame_counter % p == 0);
        if due {
            match update_trace(h_l, &mask, &self.params.flags) {
                Ok(new_trace) => {
                    let new_map = compute_heatmap(h_l, &new_trace, &self.params)?;
                    match update_threshold(&new_map, &mask, &self.params)? {
                        Some(t) => {
                            self.trace = Some(new_trace);
                            self.threshold = Some(t);
                            self.stale_count = 0;
                        }
                        None => self.stale_count += 1,
                    }
                }
                Err(AcatError::DegenerateMask(_)) => {
                    self.clear();
                    return Ok((net.forward_slice(h_l, l, n)?, None, FrameMode::Reset));
                }
                Err(e) => return Err(e),
            }
            if self.stale_count > MAX_STALE_FRAMES {
                self.clear();
                return Ok((net.forward_slice(h_l, l, n)?, None, FrameMode::Reset));
            }
        }
        let h_z = tape.activation(z).expect("prefix records layer z");
        let output = apply_defense_mask(net, h_z, &mask, z, l)?;
        Ok((output, Some(mask), FrameMode::Traced))
    }
}

/// One row of the per-frame event log.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEvent {
    pub frame_index: usize,
    pub mode: FrameMode,
    pub pass_units: f64,
    /// Adversarial pixels in the applied mask.
    pub mask_pixel_count: usize,
    /// Threshold after the frame, if a trace is active.
    pub xi: Option<f64>,
    pub mask_iou: Option<f64>,
}

pub const EVENT_CSV_HEADER: &str = "frame_index,mode,pass_units,mask_pixel_count,xi,mask_iou";

impl FrameEvent {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.3},{},{},{}",
            self.frame_index,
            self.mode,
            self.pass_units,
            self.mask_pixel_count,
            opt(self.xi),
            opt(self.mask_iou)
        )
    }
}

pub fn events_csv(events: &[FrameEvent]) -> String {
    let mut s = String::from(EVENT_CSV_HEADER);
    s.push('\n');
    for e in events {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamReport {
    pub outcomes: Vec<FrameOutcome>,
    pub events: Vec<FrameEvent>,
    /// Sum of per-frame pass units.
    pub total_passes: f64,
}

impl StreamReport {
    /// Mean Mask-IoU over frames from the first detection on.
    pub fn mean_mask_iou_after_detection(&self) -> Option<f64> {
        let first = self.events.iter().position(|e| e.mode == FrameMode::Detected)?;
        let vals: Vec<f64> = self.events[first..].iter().filter_map(|e| e.mask_iou).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn count_mode(&self, mode: FrameMode) -> usize {
        self.events.iter().filter(|e| e.mode == mode).count()
    }
}

/// Mask-IoU at the mask's resolution, ground truth (defense convention, any
/// resolution) resized by nearest neighbour; no mask counts as nothing
/// flagged.
pub fn frame_mask_iou(mask_used: Option<&BinaryMask>, gt: &BinaryMask, dims: (usize, usize)) -> Result<f64> {
    let gt = if gt.dims() == dims {
        gt.clone()
    } else {
        resize_mask(gt, dims.0, dims.1)?
    };
    let pred = mask_used.cloned().unwrap_or_else(|| BinaryMask::ones(dims.0, dims.1));
    mask_iou(&pred, &gt)
}

/// Folds [`AcatState::process_frame`] over a stream, logging one event per
/// frame and Mask-IoU when ground truth is given.
pub fn run_stream(
    state: &mut AcatState,
    net: &SlicedNetwork,
    frames: &[ActivationTensor],
    detector: &mut dyn StartingMaskProvider,
    gt_masks: Option<&[BinaryMask]>,
) -> Result<StreamReport> {
    if frames.is_empty() {
        return Err(AcatError::config("stream has no frames"));
    }
    if let Some(gt) = gt_masks {
        if gt.len() != frames.len() {
            return Err(AcatError::Data(format!("{} frames but {} masks", frames.len(), gt.len())));
        }
    }
    let mut outcomes = Vec::with_capacity(frames.len());
    let mut events = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let wrap = |e: AcatError| AcatError::Frame {
            index: k,
            source: Box::new(e),
        };
        let out = state.process_frame(net, frame, detector).map_err(wrap)?;
        let l = state.params.monitored_layer;
        let mask_iou = match gt_masks {
            Some(gt) => {
                let (_, lh, lw) = net.check_frame_dims(frame.height(), frame.width()).map_err(wrap)?[l];
                Some(frame_mask_iou(out.mask_used.as_ref(), &gt[k], (lh, lw)).map_err(wrap)?)
            }
            None => None,
        };
        events.push(FrameEvent {
            frame_index: k,
            mode: out.mode,
            pass_units: out.forward_pass_units,
            mask_pixel_count: out.mask_used.as_ref().map_or(0, BinaryMask::count_zeros),
            xi: state.threshold().map(|t| t.xi),
            mask_iou,
        });
        outcomes.push(out);
    }
    let total_passes = outcomes.iter().map(|o| o.forward_pass_units).sum();
    Ok(StreamReport {
        outcomes,
        events,
        total_passes,
    })
}

/// Reference defense without a trace: every frame runs the detector pass
/// and, when it fires, a second full pass with the detector's mask.
pub fn run_two_pass_baseline(
    net: &SlicedNetwork,
    params: &DefenseParams,
    frames: &[ActivationTensor],
    detector: &mut dyn StartingMaskProvider,
) -> Result<Vec<FrameOutcome>> {
    params.validate(net)?;
    let (l, z) = (params.monitored_layer, params.apply_layer);
    frames
        .iter()
        .enumerate()
        .map(|(k, frame)| {
            let mut run = || -> Result<FrameOutcome> {
                let dims = net.check_frame_dims(frame.height(), frame.width())?;
                let before: u64 = net.execution_counts().iter().sum();
                let mut tape = GradientTape::input_only();
                let plain = net.forward_recorded(frame, 0, net.num_layers(), &mut tape)?;
                let pass = DetectorPass { frame_index: k, tape: &tape };
                let (output, mask_used, mode) = match detector.starting_mask(&pass)? {
                    None => (plain, None, FrameMode::Clean),
                    Some(m) => {
                        let (_, lh, lw) = dims[l];
                        let m = resize_mask(&m, lh, lw)?;
                        let h_z = net.forward_slice(frame, 0, z)?;
                        (apply_defense_mask(net, &h_z, &m, z, l)?, Some(m), FrameMode::Detected)
                    }
                };
                let after: u64 = net.execution_counts().iter().sum();
                Ok(FrameOutcome {
                    output,
                    mask_used,
                    mode,
                    forward_pass_units: (after - before) as f64 / net.num_layers() as f64,
                })
            };
            run().map_err(|e| AcatError::Frame {
                index: k,
                source: Box::new(e),
            })
        })
        .collect()
}
