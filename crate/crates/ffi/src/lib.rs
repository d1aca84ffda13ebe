//! C interface to the defense runtime.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns an [`AcatStatus`]
//! and stores a message retrievable with [`acat_last_error_message`] on the
//! calling thread.
//!
//! Frames are `double` arrays laid out channel-major, then row, then column.
//! Masks are `uint8_t` arrays with 1 for clean pixels and 0 for adversarial
//! ones.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use acat_core::acat::{default_lambda_m, AcatState, DetectorPass, FrameMode, StartingMaskProvider};
use acat_core::defense::{DefenseFlags, DefenseParams};
use acat_core::net::{argmax_labels, load_weights, SlicedNetwork};
use acat_core::tensor::{ActivationTensor, BinaryMask};
use acat_core::AcatError;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcatStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad shape, length, or parameter value.
    InvalidArgument = 2,
    Io = 3,
    /// Malformed weights file.
    Format = 4,
    /// Any other failure inside the runtime.
    Runtime = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// What the defense did with a frame.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcatFrameMode {
    Clean = 0,
    Detected = 1,
    Traced = 2,
    Reset = 3,
}

impl From<FrameMode> for AcatFrameMode {
    fn from(m: FrameMode) -> Self {
        match m {
            FrameMode::Clean => AcatFrameMode::Clean,
            FrameMode::Detected => AcatFrameMode::Detected,
            FrameMode::Traced => AcatFrameMode::Traced,
            FrameMode::Reset => AcatFrameMode::Reset,
        }
    }
}

pub const ACAT_FLAG_ATT_PLUS: u32 = 1;
pub const ACAT_FLAG_ATT_MINUS: u32 = 2;
pub const ACAT_FLAG_UPD: u32 = 4;
pub const ACAT_FLAG_NF: u32 = 8;
pub const ACAT_FLAG_ALL: u32 = 15;

/// Defense settings. Fill with [`acat_defense_config_default`] before
/// changing individual fields.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcatDefenseConfig {
    pub monitored_layer: u32,
    pub tau: f64,
    /// Bitwise OR of the `ACAT_FLAG_*` constants.
    pub flags: u32,
    /// Frames between trace updates; 0 never updates.
    pub update_period: u32,
    /// Reset threshold in adversarial pixels; 0 picks the default for the frame size.
    pub lambda_m: u32,
}

/// Per-frame report.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcatFrameInfo {
    pub mode: AcatFrameMode,
    /// Layer executions in units of full forward passes.
    pub pass_units: f64,
    /// Adversarial pixels in the applied mask, at monitored-layer resolution.
    pub mask_pixels: usize,
    /// Current threshold, NaN when no trace is active.
    pub xi: f64,
}

/// A loaded segmentation network.
pub struct AcatNet {
    net: SlicedNetwork,
}

/// Defense state bound to one network and one frame size.
pub struct AcatDefense {
    net: SlicedNetwork,
    state: AcatState,
    channels: usize,
    height: usize,
    width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &AcatError) -> AcatStatus {
    match err {
        AcatError::Config(_) | AcatError::Domain(_) | AcatError::Data(_) | AcatError::Placement(_) => {
            AcatStatus::InvalidArgument
        }
        AcatError::Io(_) => AcatStatus::Io,
        AcatError::Format { .. } => AcatStatus::Format,
        AcatError::Frame { source, .. } => status_of(source),
        _ => AcatStatus::Runtime,
    }
}

struct Failure(AcatStatus, String);

impl From<AcatError> for Failure {
    fn from(e: AcatError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AcatStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(AcatStatus::InvalidArgument, msg.into())
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AcatStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AcatStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            AcatStatus::Panic
        }
    }
}

unsafe fn frame_from_raw(
    data: *const f64,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<ActivationTensor, Failure> {
    if data.is_null() {
        return Err(null("frame"));
    }
    let len = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("frame dims {channels}x{height}x{width} are empty or overflow")))?;
    let slice = std::slice::from_raw_parts(data, len);
    Ok(ActivationTensor::new(channels, height, width, slice.to_vec())?)
}

unsafe fn write_labels(logits: &ActivationTensor, out: *mut u8, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Ok(());
    }
    let labels = argmax_labels(logits);
    if len != labels.data.len() {
        return Err(invalid(format!(
            "label buffer holds {len} bytes, output needs {}",
            labels.data.len()
        )));
    }
    std::slice::from_raw_parts_mut(out, len).copy_from_slice(&labels.data);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn acat_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn acat_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads network weights from `path`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn acat_net_load(path: *const c_char, out: *mut *mut AcatNet) -> AcatStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let net = load_weights(Path::new(p))?;
        *out = Box::into_raw(Box::new(AcatNet { net }));
        Ok(())
    })
}

/// Creates the untrained toy network with seeded initial weights.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn acat_net_toy(class_count: u32, seed: u64, out: *mut *mut AcatNet) -> AcatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(2..=255).contains(&class_count) {
            return Err(invalid(format!("class_count {class_count} outside 2..=255")));
        }
        let net = SlicedNetwork::toy(class_count as usize, seed);
        *out = Box::into_raw(Box::new(AcatNet { net }));
        Ok(())
    })
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acat_net_free(net: *mut AcatNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acat_net_class_count(net: *const AcatNet) -> usize {
    net.as_ref().map_or(0, |n| n.net.class_count())
}

/// Undefended segmentation: writes one class index per pixel into `labels`,
/// which must hold `height * width` bytes.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn acat_net_segment(
    net: *const AcatNet,
    frame: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    labels: *mut u8,
    labels_len: usize,
) -> AcatStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let x = frame_from_raw(frame, channels, height, width)?;
        let logits = net.net.forward(&x)?;
        write_labels(&logits, labels, labels_len)
    })
}

/// Writes the default defense settings into `out`.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn acat_defense_config_default(out: *mut AcatDefenseConfig) -> AcatStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = DefenseParams::default();
        *out = AcatDefenseConfig {
            monitored_layer: d.monitored_layer as u32,
            tau: d.tau,
            flags: ACAT_FLAG_ALL,
            update_period: d.update_period.map_or(0, |p| p as u32),
            lambda_m: 0,
        };
        Ok(())
    })
}

fn params_from(cfg: &AcatDefenseConfig) -> Result<DefenseParams, Failure> {
    if cfg.flags & !ACAT_FLAG_ALL != 0 {
        return Err(invalid(format!("unknown flag bits {:#x}", cfg.flags & !ACAT_FLAG_ALL)));
    }
    let layer = cfg.monitored_layer as usize;
    Ok(DefenseParams {
        monitored_layer: layer,
        apply_layer: layer,
        tau: cfg.tau,
        flags: DefenseFlags {
            att_plus: cfg.flags & ACAT_FLAG_ATT_PLUS != 0,
            att_minus: cfg.flags & ACAT_FLAG_ATT_MINUS != 0,
            upd: cfg.flags & ACAT_FLAG_UPD != 0,
            nf: cfg.flags & ACAT_FLAG_NF != 0,
        },
        update_period: (cfg.update_period > 0).then_some(cfg.update_period as usize),
        ..DefenseParams::default()
    })
}

/// Creates defense state for `channels x height x width` frames. The network
/// is copied, so `net` may be freed afterwards. A null `config` uses the
/// defaults.
///
/// # Safety
/// `net` must be a live handle, `config` null or readable, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn acat_defense_new(
    net: *const AcatNet,
    config: *const AcatDefenseConfig,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut *mut AcatDefense,
) -> AcatStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let params = match config.as_ref() {
            Some(c) => params_from(c)?,
            None => DefenseParams::default(),
        };
        params.validate(&net.net)?;
        if channels != net.net.in_channels() {
            return Err(invalid(format!(
                "network expects {} channels, got {channels}",
                net.net.in_channels()
            )));
        }
        net.net.check_frame_dims(height, width)?;
        let lambda_m = match config.as_ref().map_or(0, |c| c.lambda_m) {
            0 => default_lambda_m(&net.net, height, width, params.monitored_layer)?,
            n => n as usize,
        };
        *out = Box::into_raw(Box::new(AcatDefense {
            net: net.net.clone(),
            state: AcatState::new(params, lambda_m),
            channels,
            height,
            width,
        }));
        Ok(())
    })
}

/// Releases defense state. Null is ignored.
///
/// # Safety
/// `defense` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acat_defense_free(defense: *mut AcatDefense) {
    if !defense.is_null() {
        drop(Box::from_raw(defense));
    }
}

struct OneShot(Option<BinaryMask>);

impl StartingMaskProvider for OneShot {
    fn starting_mask(&mut self, _: &DetectorPass<'_>) -> acat_core::Result<Option<BinaryMask>> {
        Ok(self.0.take().filter(|m| m.count_zeros() > 0))
    }
}

/// Runs one frame through the defense.
///
/// `start_mask` is an optional `height * width` mask that seeds the trace
/// when none is active; pass null when no detection is available. `labels`
/// may be null; otherwise it receives `height * width` class indices of the
/// defended output. `info` may be null.
///
/// # Safety
/// Pointers must be null where allowed or valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn acat_defense_process(
    defense: *mut AcatDefense,
    frame: *const f64,
    start_mask: *const u8,
    labels: *mut u8,
    labels_len: usize,
    info: *mut AcatFrameInfo,
) -> AcatStatus {
    guard(|| {
        let d = defense.as_mut().ok_or_else(|| null("defense"))?;
        let x = frame_from_raw(frame, d.channels, d.height, d.width)?;
        let start = if start_mask.is_null() {
            None
        } else {
            let raw = std::slice::from_raw_parts(start_mask, d.height * d.width);
            if raw.iter().any(|&v| v > 1) {
                return Err(invalid("start mask values must be 0 or 1"));
            }
            Some(BinaryMask::new(d.height, d.width, raw.to_vec())?)
        };
        let mut provider = OneShot(start);
        let outcome = d.state.process_frame(&d.net, &x, &mut provider)?;
        write_labels(&outcome.output, labels, labels_len)?;
        if let Some(info) = info.as_mut() {
            *info = AcatFrameInfo {
                mode: outcome.mode.into(),
                pass_units: outcome.forward_pass_units,
                mask_pixels: outcome.mask_used.as_ref().map_or(0, BinaryMask::count_zeros),
                xi: d.state.threshold().map_or(f64::NAN, |t| t.xi),
            };
        }
        Ok(())
    })
}

/// Resets performed so far, or 0 for a null handle.
///
/// # Safety
/// `defense` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acat_defense_resets(defense: *const AcatDefense) -> usize {
    defense.as_ref().map_or(0, |d| d.state.resets())
}
