//! YOLO-style multi-task objective over `S` regions.
//!
//! `L = λ_bound/S Σ obj_i [(b_s − b̂_s)² + (b_e − b̂_e)²]
//!    + λ_conf/S Σ BCE(p_i, obj_i)
//!    + λ_class/S Σ obj_i CE(c_i, ĉ_i)`
//!
//! Both cross-entropies are negative log-likelihoods, so every term is
//! non-negative. Everything is computed from logits for stability.

use serde::{Deserialize, Serialize};

use super::head::{logit_index, RegionPrediction, RegionTarget, OUTPUTS};
use super::ops::{log_sum_exp, sigmoid, softmax_in_place, softplus};
use super::DetectorError;
use crate::simulate::DysfluencyType;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bound: f64,
    pub conf: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bound: 5.0,
            conf: 1.0,
            class: 0.5,
        }
    }
}

/// Weighted terms and their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bound: f64,
    pub conf: f64,
    pub class: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.bound += w * other.bound;
        self.conf += w * other.conf;
        self.class += w * other.class;
        self.total += w * other.total;
    }
}

/// Loss and `d loss / d logits` (`S x 8`).
pub fn yolo_loss_from_logits(
    logits: &[f64],
    targets: &[RegionTarget],
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>), DetectorError> {
    let s = targets.len();
    if s == 0 || logits.len() != s * OUTPUTS {
        return Err(DetectorError::ShapeMismatch {
            expected: format!("{} logits", s * OUTPUTS),
            got: format!("{}", logits.len()),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DetectorError::NumericalError("logits".into()));
    }
    let (conf_i, class_i, start_i, end_i) = logit_index();
    let inv_s = 1.0 / s as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut out = LossBreakdown::default();
    for (i, t) in targets.iter().enumerate() {
        let l = &logits[i * OUTPUTS..(i + 1) * OUTPUTS];
        let g = &mut grad[i * OUTPUTS..(i + 1) * OUTPUTS];
        let y = if t.has_dysfluency { 1.0 } else { 0.0 };
        // BCE(σ(z), y) = softplus(z) − y z
        out.conf += w.conf * inv_s * (softplus(l[conf_i]) - y * l[conf_i]);
        g[conf_i] = w.conf * inv_s * (sigmoid(l[conf_i]) - y);
        if !t.has_dysfluency {
            continue;
        }
        let class_logits = &l[class_i..start_i];
        let lse = log_sum_exp(class_logits);
        let mut probs = [0.0; DysfluencyType::COUNT];
        probs.copy_from_slice(class_logits);
        softmax_in_place(&mut probs);
        for k in 0..DysfluencyType::COUNT {
            out.class += w.class * inv_s * t.class_onehot[k] * (lse - class_logits[k]);
        }
        let mass: f64 = t.class_onehot.iter().sum();
        for k in 0..DysfluencyType::COUNT {
            g[class_i + k] = w.class * inv_s * (mass * probs[k] - t.class_onehot[k]);
        }
        for (idx, target) in [(start_i, t.b_start), (end_i, t.b_end)] {
            let b = sigmoid(l[idx]);
            let diff = b - target;
            out.bound += w.bound * inv_s * diff * diff;
            g[idx] = w.bound * inv_s * 2.0 * diff * b * (1.0 - b);
        }
    }
    out.total = out.bound + out.conf + out.class;
    if !out.total.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(DetectorError::NumericalError("loss".into()));
    }
    Ok((out, grad))
}

/// Loss over activated predictions (uses the logits they carry).
pub fn yolo_loss(
    preds: &[RegionPrediction],
    targets: &[RegionTarget],
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>), DetectorError> {
    if preds.len() != targets.len() {
        return Err(DetectorError::ShapeMismatch {
            expected: format!("{} regions", targets.len()),
            got: format!("{}", preds.len()),
        });
    }
    let logits: Vec<f64> = preds.iter().flat_map(|p| p.logits).collect();
    yolo_loss_from_logits(&logits, targets, w)
}
