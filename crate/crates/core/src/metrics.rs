//! Evaluation: type accuracy, confidence accuracy, bound loss in
//! milliseconds and Time F1 over decoded detector outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{assign_responsibility, DetectorError, RegionPrediction};
use crate::simulate::{Annotation, DysfluencyType};
use crate::FRAME_MS;

/// Default decision threshold on region confidence.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("nothing to evaluate: {0}")]
    EmptyEval(&'static str),
}

/// A decoded detection in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "type")]
    pub dtype: DysfluencyType,
    pub start_ms: f64,
    pub end_ms: f64,
}

/// Gold event with the region responsible for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoldEvent {
    pub annotation: Annotation,
    pub region: usize,
}

impl GoldEvent {
    pub fn start_ms(&self) -> f64 {
        self.annotation.start_frame as f64 * FRAME_MS
    }

    pub fn end_ms(&self) -> f64 {
        self.annotation.end_frame as f64 * FRAME_MS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sample_id: usize,
    pub gold: Option<GoldEvent>,
    pub preds: Vec<RegionPrediction>,
    pub decoded: Option<Detection>,
    /// Padded frame count the bounds are normalized by.
    pub t_max: usize,
}

impl EvalRecord {
    pub fn new(
        sample_id: usize,
        annotation: Option<Annotation>,
        t_len: usize,
        t_max: usize,
        preds: Vec<RegionPrediction>,
    ) -> Result<Self, DetectorError> {
        let gold = match annotation {
            Some(a) => {
                let (region, _) = assign_responsibility(&a, t_len, t_max, preds.len())?;
                Some(GoldEvent { annotation: a, region })
            }
            None => None,
        };
        let decoded = decode_scaled(&preds, THRESHOLD, t_max);
        Ok(Self {
            sample_id,
            gold,
            preds,
            decoded,
            t_max,
        })
    }
}

/// Decodes the most confident region; bounds scale by `t_max` frames.
pub fn decode_scaled(preds: &[RegionPrediction], threshold: f64, t_max: usize) -> Option<Detection> {
    let mut best: Option<&RegionPrediction> = None;
    for p in preds {
        if best.map_or(true, |b| p.confidence > b.confidence) {
            best = Some(p);
        }
    }
    let p = best?;
    if p.confidence <= threshold {
        return None;
    }
    let scale = t_max as f64 * FRAME_MS;
    Some(Detection {
        dtype: p.class(),
        start_ms: p.b_start * scale,
        end_ms: p.b_end * scale,
    })
}

/// Decodes against the standard 1024-frame padding. `None` means fluent.
pub fn decode(preds: &[RegionPrediction], threshold: f64) -> Option<Detection> {
    decode_scaled(preds, threshold, crate::MAX_FRAMES)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    /// Keyed by short type name; only types present in the gold set.
    pub per_type: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    /// Unweighted mean over the present types.
    pub macro_avg: f64,
}

pub fn type_accuracy(records: &[EvalRecord]) -> Result<TypeAccuracy, MetricsError> {
    let mut hits = [0usize; DysfluencyType::COUNT];
    let mut totals = [0usize; DysfluencyType::COUNT];
    for r in records {
        let Some(g) = r.gold else { continue };
        let t = g.annotation.dtype.index();
        totals[t] += 1;
        if r.decoded.map(|d| d.dtype) == Some(g.annotation.dtype) {
            hits[t] += 1;
        }
    }
    let mut per_type = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for t in DysfluencyType::ALL {
        let n = totals[t.index()];
        if n > 0 {
            per_type.insert(t.short_name().to_string(), hits[t.index()] as f64 / n as f64);
            counts.insert(t.short_name().to_string(), n);
        }
    }
    if per_type.is_empty() {
        return Err(MetricsError::EmptyEval("no gold dysfluencies"));
    }
    let macro_avg = per_type.values().sum::<f64>() / per_type.len() as f64;
    Ok(TypeAccuracy {
        per_type,
        counts,
        macro_avg,
    })
}

/// Micro-averaged per-region agreement of `conf > 0.5` with the target.
pub fn confidence_accuracy(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for r in records {
        for (i, p) in r.preds.iter().enumerate() {
            let obj = r.gold.is_some_and(|g| g.region == i);
            correct += usize::from((p.confidence > THRESHOLD) == obj);
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptyEval("no regions"));
    }
    Ok(correct as f64 / total as f64)
}

fn squared_bound_error(r: &EvalRecord) -> Option<f64> {
    let g = r.gold?;
    r.decoded?;
    let p = &r.preds[g.region];
    let t = r.t_max as f64;
    let ds = p.b_start - g.annotation.start_frame as f64 / t;
    let de = p.b_end - g.annotation.end_frame as f64 / t;
    Some(ds * ds + de * de)
}

/// `sqrt(MSE) * t_max * 20 ms` over the responsible regions of
/// gold-dysfluent records that decoded to a detection.
pub fn bound_loss_ms(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    bound_loss_where(records, |_| true)
}

/// Bound loss restricted to one gold type.
pub fn bound_loss_ms_for(records: &[EvalRecord], dtype: DysfluencyType) -> Result<f64, MetricsError> {
    bound_loss_where(records, |r| r.gold.is_some_and(|g| g.annotation.dtype == dtype))
}

fn bound_loss_where(records: &[EvalRecord], keep: impl Fn(&EvalRecord) -> bool) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut scale = 0.0;
    for r in records.iter().filter(|r| keep(r)) {
        if let Some(e) = squared_bound_error(r) {
            sum += e;
            n += 2;
            scale = r.t_max as f64 * FRAME_MS;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyEval("no decoded gold dysfluencies"));
    }
    Ok((sum / n as f64).sqrt() * scale)
}

/// Open intervals `(a0, a1)` and `(b0, b1)` intersect.
pub fn overlaps(a0: f64, a1: f64, b0: f64, b1: f64) -> bool {
    a0.max(b0) < a1.min(b1)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn time_counts(records: &[EvalRecord]) -> Counts {
    let mut c = Counts::default();
    for r in records {
        match (r.decoded, r.gold) {
            (Some(d), Some(g)) => {
                if overlaps(d.start_ms, d.end_ms, g.start_ms(), g.end_ms()) {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                    c.fn_ += 1;
                }
            }
            (Some(_), None) => c.fp += 1,
            (None, Some(_)) => c.fn_ += 1,
            (None, None) => {}
        }
    }
    c
}

/// Sample-level F1 where any overlap is a hit. With nothing to find and
/// nothing predicted the score is 1.
pub fn time_f1(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyEval("no records"));
    }
    let c = time_counts(records);
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * c.tp as f64 / denom as f64)
}

/// Metrics report as written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_type_acc: BTreeMap<String, f64>,
    pub per_type_bound_loss_ms: BTreeMap<String, f64>,
    pub type_acc: f64,
    pub conf_acc: f64,
    pub bound_loss_ms: Option<f64>,
    pub time_f1: f64,
    pub n_samples: usize,
    pub config_digest: String,
}

impl Report {
    pub fn compute(records: &[EvalRecord], config_digest: &str) -> Result<Self, MetricsError> {
        if records.is_empty() {
            return Err(MetricsError::EmptyEval("no records"));
        }
        let types = type_accuracy(records)?;
        let mut per_type_bound_loss_ms = BTreeMap::new();
        for t in DysfluencyType::ALL {
            if let Ok(bl) = bound_loss_ms_for(records, t) {
                per_type_bound_loss_ms.insert(t.short_name().to_string(), bl);
            }
        }
        Ok(Self {
            per_type_acc: types.per_type,
            per_type_bound_loss_ms,
            type_acc: types.macro_avg,
            conf_acc: confidence_accuracy(records)?,
            bound_loss_ms: bound_loss_ms(records).ok(),
            time_f1: time_f1(records)?,
            n_samples: records.len(),
            config_digest: config_digest.to_string(),
        })
    }

    /// Per-type Acc/BL table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10}{:>10}{:>12}\n", "Type", "Acc(%)", "BL(ms)"));
        for t in DysfluencyType::ALL {
            let name = t.short_name();
            let acc = self
                .per_type_acc
                .get(name)
                .map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
            let bl = self
                .per_type_bound_loss_ms
                .get(name)
                .map_or("-".to_string(), |b| format!("{b:.1}"));
            out.push_str(&format!("{name:<10}{acc:>10}{bl:>12}\n"));
        }
        out.push_str(&format!("{:<10}{:>10.2}\n", "macro", 100.0 * self.type_acc));
        out.push_str(&format!("conf_acc {:.4}  time_f1 {:.4}  n={}\n", self.conf_acc, self.time_f1, self.n_samples));
        out
    }
}
