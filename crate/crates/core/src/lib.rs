//! Multi-frame defense against adversarial patches for convolutional vision
//! models, based on adversarial-channel attention tracing (ACAT).
//!
//! A single-frame detector localizes a patch once; from then on per-channel
//! attention weights (the adversarial trace) computed at a shallow layer
//! track and mask the patch in later frames at the cost of one inference
//! pass per frame.
//!
//! Module map:
//! - [`tensor`]: tensors, masks and the image/feature kernels.
//! - [`net`]: the sliceable CNN, gradients, training and weight files.
//! - [`attack`]: patch pasting, motion and over-activation-aware EOT.
//! - [`defense`]: heatmap, trace, adaptive threshold, masking, detector.
//! - [`acat`]: the per-frame tracking state machine.
//! - [`eval`]: metrics, procedural datasets and experiment runners.

pub mod acat;
pub mod attack;
pub mod config;
pub mod defense;
pub mod error;
pub mod eval;
pub mod net;
pub mod pnm;
pub mod tensor;

pub use error::{AcatError, Result};

/// Version string written next to every run's results.
pub const VERSION: &str = concat!("acat ", env!("CARGO_PKG_VERSION"));
