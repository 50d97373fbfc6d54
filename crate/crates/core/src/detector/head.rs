use super::ops::{layer_norm, layer_norm_backward, linear, linear_backward, sigmoid, softmax_in_place, LayerNormCache};
use super::params::ModelParams;
use super::DetectorError;
use crate::simulate::{Annotation, DysfluencyType};

/// Head outputs per region: confidence, five class logits, start, end.
pub const OUTPUTS: usize = 3 + DysfluencyType::COUNT;
const CONF: usize = 0;
const CLASS: usize = 1;
const START: usize = 1 + DysfluencyType::COUNT;
const END: usize = START + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionTarget {
    pub has_dysfluency: bool,
    pub class_onehot: [f64; DysfluencyType::COUNT],
    pub b_start: f64,
    pub b_end: f64,
}

impl RegionTarget {
    pub fn fluent() -> Self {
        Self {
            has_dysfluency: false,
            class_onehot: [0.0; DysfluencyType::COUNT],
            b_start: 0.0,
            b_end: 0.0,
        }
    }

    pub fn class(&self) -> Option<DysfluencyType> {
        if !self.has_dysfluency {
            return None;
        }
        self.class_onehot
            .iter()
            .position(|&v| v == 1.0)
            .and_then(DysfluencyType::from_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrediction {
    pub confidence: f64,
    pub class_probs: [f64; DysfluencyType::COUNT],
    pub b_start: f64,
    pub b_end: f64,
    pub logits: [f64; OUTPUTS],
}

impl RegionPrediction {
    pub fn from_logits(l: &[f64]) -> Self {
        let mut logits = [0.0; OUTPUTS];
        logits.copy_from_slice(&l[..OUTPUTS]);
        let mut class_probs = [0.0; DysfluencyType::COUNT];
        class_probs.copy_from_slice(&logits[CLASS..START]);
        softmax_in_place(&mut class_probs);
        Self {
            confidence: sigmoid(logits[CONF]),
            class_probs,
            b_start: sigmoid(logits[START]),
            b_end: sigmoid(logits[END]),
            logits,
        }
    }

    pub fn class(&self) -> DysfluencyType {
        let mut best = 0;
        for i in 1..DysfluencyType::COUNT {
            if self.class_probs[i] > self.class_probs[best] {
                best = i;
            }
        }
        DysfluencyType::ALL[best]
    }

    pub fn conf_logit(&self) -> f64 {
        self.logits[CONF]
    }

    pub fn class_logits(&self) -> &[f64] {
        &self.logits[CLASS..START]
    }

    pub fn bound_logits(&self) -> (f64, f64) {
        (self.logits[START], self.logits[END])
    }
}

pub(crate) fn logit_index() -> (usize, usize, usize, usize) {
    (CONF, CLASS, START, END)
}

pub struct HeadCache {
    pub norm: LayerNormCache,
    pub normed: Vec<f64>,
}

pub(super) fn forward(params: &ModelParams, embeddings: &[f64]) -> (HeadCache, Vec<f64>) {
    let cfg = &params.config;
    let (s, d) = (cfg.regions(), cfg.c_max);
    let h = &params.head;
    let (normed, norm) = layer_norm(embeddings, s, d, &h.norm_gain.data, &h.norm_bias.data);
    let logits = linear(&normed, s, &h.weight.data, &h.bias.data, d, OUTPUTS);
    (HeadCache { norm, normed }, logits)
}

pub(super) fn backward(
    params: &ModelParams,
    cache: &HeadCache,
    _embeddings: &[f64],
    dlogits: &[f64],
    grads: &mut ModelParams,
) -> Vec<f64> {
    let cfg = &params.config;
    let (s, d) = (cfg.regions(), cfg.c_max);
    let h = &params.head;
    let g = &mut grads.head;
    let d_normed = linear_backward(&cache.normed, dlogits, s, &h.weight.data, d, OUTPUTS, &mut g.weight.data, &mut g.bias.data);
    layer_norm_backward(&cache.norm, &d_normed, s, d, &h.norm_gain.data, &mut g.norm_gain.data, &mut g.norm_bias.data)
}

/// Applies the head to `S x c_max` embeddings.
pub fn predict_regions(embeddings: &[f64], params: &ModelParams) -> Result<Vec<RegionPrediction>, DetectorError> {
    let cfg = &params.config;
    if embeddings.len() != cfg.regions() * cfg.c_max {
        return Err(DetectorError::ShapeMismatch {
            expected: format!("{}x{}", cfg.regions(), cfg.c_max),
            got: format!("{} values", embeddings.len()),
        });
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(DetectorError::NumericalError("embeddings".into()));
    }
    let (_, logits) = forward(params, embeddings);
    Ok(logits.chunks_exact(OUTPUTS).map(RegionPrediction::from_logits).collect())
}

/// Picks the region containing the annotation midpoint and builds all `S`
/// targets. Bounds are normalized by the padded length `t_max`.
pub fn assign_responsibility(
    ann: &Annotation,
    t_len: usize,
    t_max: usize,
    regions: usize,
) -> Result<(usize, Vec<RegionTarget>), DetectorError> {
    if ann.start_frame >= ann.end_frame || ann.end_frame > t_len || t_len > t_max {
        return Err(DetectorError::OutOfRange {
            start: ann.start_frame,
            end: ann.end_frame,
            t_len,
        });
    }
    let width = (t_max / regions) as f64;
    let region = ((ann.midpoint() / width).floor() as usize).min(regions - 1);
    let mut targets = vec![RegionTarget::fluent(); regions];
    let mut onehot = [0.0; DysfluencyType::COUNT];
    onehot[ann.dtype.index()] = 1.0;
    targets[region] = RegionTarget {
        has_dysfluency: true,
        class_onehot: onehot,
        b_start: ann.start_frame as f64 / t_max as f64,
        b_end: ann.end_frame as f64 / t_max as f64,
    };
    Ok((region, targets))
}
