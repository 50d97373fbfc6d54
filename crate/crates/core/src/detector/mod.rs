//! Region-wise dysfluency detector.
//!
//! A stack of depthwise + grouped convolution blocks halves the time axis of
//! the `c_max x t_max` alignment until `S` regions remain, a pre-norm
//! transformer encoder treats those regions as a sequence (text rows are the
//! embedding width), and an affine head emits one confidence logit, five
//! class logits and two bound logits per region. All gradients are written
//! out by hand.

mod aggregator;
mod checkpoint;
mod encoder;
mod head;
mod loss;
mod ops;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aggregator::{spatial_aggregate, AggregatorCache};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use encoder::{positional_encoding, temporal_extract, EncoderCache};
pub use head::{assign_responsibility, predict_regions, RegionPrediction, RegionTarget, OUTPUTS};
pub use loss::{yolo_loss, yolo_loss_from_logits, LossBreakdown, LossWeights};
pub use params::{ModelParams, Tensor};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("annotation [{start}, {end}) outside [0, {t_len})")]
    OutOfRange { start: usize, end: usize, t_len: usize },
    #[error("non-finite value in {0}")]
    NumericalError(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Padded text length; also the channel and embedding width.
    pub c_max: usize,
    /// Padded frame count.
    pub t_max: usize,
    /// Number of stride-2 convolution blocks.
    pub blocks: usize,
    /// Depthwise kernel length (odd).
    pub kernel: usize,
    pub groups: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_max: 128,
            t_max: crate::MAX_FRAMES,
            blocks: 6,
            kernel: 3,
            groups: 8,
            layers: 8,
            heads: 8,
            ffn_dim: 512,
        }
    }
}

impl ModelConfig {
    /// Default widths with a two-layer encoder.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            ..Self::default()
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn miniature() -> Self {
        Self {
            c_max: 16,
            t_max: 16,
            blocks: 2,
            kernel: 3,
            groups: 4,
            layers: 1,
            heads: 2,
            ffn_dim: 32,
        }
    }

    /// Number of regions `S = t_max / 2^blocks`.
    pub fn regions(&self) -> usize {
        self.t_max >> self.blocks
    }

    /// Frames covered by one region.
    pub fn region_frames(&self) -> usize {
        1 << self.blocks
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_string()));
        if self.c_max == 0 || self.t_max == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return bad("sizes must be positive");
        }
        if self.blocks >= usize::BITS as usize || self.t_max % (1 << self.blocks) != 0 || self.regions() == 0 {
            return bad("t_max must be a positive multiple of 2^blocks");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.groups == 0 || self.c_max % self.groups != 0 {
            return bad("c_max must be divisible by groups");
        }
        if self.heads == 0 || self.c_max % self.heads != 0 {
            return bad("c_max must be divisible by heads");
        }
        Ok(())
    }
}

/// Full forward pass with every intermediate needed for backprop.
pub struct ForwardCache {
    pub aggregator: AggregatorCache,
    pub encoder: EncoderCache,
    pub head: head::HeadCache,
    /// `S x 8` raw head outputs.
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn predictions(&self) -> Vec<RegionPrediction> {
        self.logits.chunks_exact(OUTPUTS).map(RegionPrediction::from_logits).collect()
    }
}

/// Runs the whole detector on a padded `c_max x t_max` input.
pub fn forward(params: &ModelParams, input: &[f64]) -> Result<ForwardCache, DetectorError> {
    let cfg = params.config;
    if input.len() != cfg.c_max * cfg.t_max {
        return Err(DetectorError::ShapeMismatch {
            expected: format!("{}x{}", cfg.c_max, cfg.t_max),
            got: format!("{} values", input.len()),
        });
    }
    let aggregator = aggregator::forward(params, input);
    let encoder = encoder::forward(params, &aggregator.output, true);
    let (head, logits) = head::forward(params, &encoder.output);
    Ok(ForwardCache {
        aggregator,
        encoder,
        head,
        logits,
    })
}

/// Predictions only.
pub fn infer(params: &ModelParams, input: &[f64]) -> Result<Vec<RegionPrediction>, DetectorError> {
    Ok(forward(params, input)?.predictions())
}

/// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: &[f64],
    grads: &mut ModelParams,
) -> Result<(), DetectorError> {
    let d_embed = head::backward(params, &cache.head, &cache.encoder.output, dlogits, grads);
    let d_features = encoder::backward(params, &cache.encoder, &d_embed, grads);
    aggregator::backward(params, &cache.aggregator, &d_features, grads);
    if !grads.all_finite() {
        return Err(DetectorError::NumericalError("gradients".into()));
    }
    Ok(())
}

/// Loss and gradient for one sample. Gradients are added into `grads`
/// after scaling by `weight`.
pub fn loss_and_grad(
    params: &ModelParams,
    input: &[f64],
    targets: &[RegionTarget],
    weights: &LossWeights,
    weight: f64,
    grads: &mut ModelParams,
) -> Result<LossBreakdown, DetectorError> {
    let cache = forward(params, input)?;
    let (loss, mut dlogits) = yolo_loss_from_logits(&cache.logits, targets, weights)?;
    for d in dlogits.iter_mut() {
        *d *= weight;
    }
    backward(params, &cache, &dlogits, grads)?;
    Ok(loss)
}

#[cfg(test)]
mod tests;
