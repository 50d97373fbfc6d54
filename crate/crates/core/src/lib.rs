//! Synthetic dysfluent-speech corpora and a region-wise dysfluency detector.
//!
//! The pipeline runs text → IPA tokens ([`phonology`]) → timed dysfluent
//! realization with a ground-truth event ([`simulate`]) → soft text/speech
//! alignment matrix ([`align`]) → convolutional aggregator, transformer
//! encoder and per-region head trained with a YOLO-style objective
//! ([`detector`], [`train`]) → time-aware evaluation ([`metrics`]).

pub mod align;
pub mod cli;
pub mod config;
pub mod detector;
pub mod metrics;
pub mod phonology;
pub mod simulate;
pub mod train;

/// Duration of one alignment frame in milliseconds.
pub const FRAME_MS: f64 = 20.0;

/// Padded length of the time axis seen by the detector.
pub const MAX_FRAMES: usize = 1024;
