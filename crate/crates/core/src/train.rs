//! Adam training loop, train/test split and the gradient-check harness.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{normalize_alignment, pad_alignment, AlignError, AlignParams, AlignmentMatrix, CompactAlignment};
use crate::detector::{
    assign_responsibility, forward, loss_and_grad, yolo_loss_from_logits, DetectorError, LossBreakdown,
    LossWeights, ModelConfig, ModelParams, RegionTarget,
};
use crate::metrics::{self, EvalRecord, MetricsError};
use crate::simulate::{mix_seed, Annotation, Sample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("numerical failure in epoch {epoch}, batch {batch}: {source}")]
    Numerical {
        epoch: usize,
        batch: usize,
        source: DetectorError,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub split_ratio: f64,
    /// Write a numbered checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 30,
            seed: 0,
            split_ratio: 0.9,
            checkpoint_every: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(TrainError::InvalidConfig("split_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            hyper: AdamHyper::default(),
        }
    }
}

/// One Adam update of a flat slice; `t` is the 1-based step number.
pub fn adam_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, h: &AdamHyper) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) -> Result<(), DetectorError> {
    if params.config != grads.config || params.config != state.m.config {
        return Err(DetectorError::ShapeMismatch {
            expected: format!("{:?}", params.config),
            got: format!("{:?}", grads.config),
        });
    }
    if !grads.all_finite() {
        return Err(DetectorError::NumericalError("gradients".into()));
    }
    let t = state.step + 1;
    let g = grads.named_tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(g).zip(ms).zip(vs) {
        adam_update(&mut p.data, &g.data, &mut m.data, &mut v.data, t, &state.hyper);
    }
    state.step = t;
    if !params.all_finite() {
        return Err(DetectorError::NumericalError("parameters after update".into()));
    }
    Ok(())
}

/// Seeded shuffle; the first `ceil(ratio * n)` items train.
pub fn split_corpus<T: Clone>(corpus: &[T], ratio: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * corpus.len() as f64).ceil() as usize).min(corpus.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect();
    (pick(&order[..n_train]), pick(&order[n_train..]))
}

/// A sample ready for the detector.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: usize,
    pub input: CompactAlignment,
    pub annotation: Annotation,
    pub targets: Vec<RegionTarget>,
}

impl Example {
    pub fn new(id: usize, input: CompactAlignment, annotation: Annotation, cfg: &ModelConfig) -> Result<Self, TrainError> {
        let ex_shape = (input.c_max, input.t_max);
        if ex_shape != (cfg.c_max, cfg.t_max) {
            return Err(DetectorError::ShapeMismatch {
                expected: format!("{}x{}", cfg.c_max, cfg.t_max),
                got: format!("{}x{}", ex_shape.0, ex_shape.1),
            }
            .into());
        }
        let (_, targets) = assign_responsibility(&annotation, input.t_len, cfg.t_max, cfg.regions())?;
        Ok(Self {
            id,
            input,
            annotation,
            targets,
        })
    }

    pub fn from_sample(sample: &Sample, align: &AlignParams, cfg: &ModelConfig) -> Result<Self, TrainError> {
        let input = compact_alignment(sample, align, cfg)?;
        Self::new(sample.id, input, sample.annotation, cfg)
    }

    pub fn t_len(&self) -> usize {
        self.input.t_len
    }
}

/// Normalized, padded alignment of a sample as stored on disk.
pub fn compact_alignment(sample: &Sample, align: &AlignParams, cfg: &ModelConfig) -> Result<CompactAlignment, AlignError> {
    let raw = sample.alignment(align)?;
    let padded = pad_alignment(&normalize_alignment(&raw), cfg.c_max, cfg.t_max)?;
    Ok(CompactAlignment::from_normalized(&padded))
}

/// Mean loss and per-sample evaluation records.
pub fn evaluate(params: &ModelParams, examples: &[Example], weights: &LossWeights) -> Result<(LossBreakdown, Vec<EvalRecord>), TrainError> {
    let cfg = params.config;
    let mut buf = Vec::new();
    let mut loss = LossBreakdown::default();
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        check_shape(ex, &cfg)?;
        ex.input.expand_into(&mut buf);
        let cache = forward(params, &buf)?;
        let (l, _) = yolo_loss_from_logits(&cache.logits, &ex.targets, weights)?;
        loss.add_scaled(&l, 1.0 / examples.len() as f64);
        records.push(EvalRecord::new(ex.id, Some(ex.annotation), ex.t_len(), cfg.t_max, cache.predictions())?);
    }
    Ok((loss, records))
}

fn check_shape(ex: &Example, cfg: &ModelConfig) -> Result<(), DetectorError> {
    if ex.input.c_max != cfg.c_max || ex.input.t_max != cfg.t_max {
        return Err(DetectorError::ShapeMismatch {
            expected: format!("{}x{}", cfg.c_max, cfg.t_max),
            got: format!("{}x{}", ex.input.c_max, ex.input.t_max),
        });
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_conf_acc: Option<f64>,
    pub test_type_acc: Option<f64>,
    pub test_bound_loss_ms: Option<f64>,
    pub test_time_f1: Option<f64>,
    /// Best selection loss so far (test loss, or train loss without a test set).
    pub best_test_loss: f64,
}

pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub last: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Trains from a fresh initialization seeded by `cfg.seed`. `on_epoch` sees
/// each log line and the current parameters.
pub fn train_model(
    model: ModelConfig,
    cfg: &TrainConfig,
    train: &[Example],
    test: &[Example],
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for ex in train.iter().chain(test) {
        check_shape(ex, &model)?;
    }
    let mut params = ModelParams::init(model, mix_seed(cfg.seed, 0x1417));
    let mut adam = AdamState::new(&params);
    let mut grads = params.zeros_like();
    let mut buf = Vec::new();
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let fail = |source| TrainError::Numerical { epoch, batch, source };
            grads.fill(0.0);
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ex = &train[i];
                ex.input.expand_into(&mut buf);
                let l = loss_and_grad(&params, &buf, &ex.targets, &cfg.loss, w, &mut grads).map_err(fail)?;
                epoch_loss += l.total;
            }
            adam_step(&mut params, &grads, &mut adam).map_err(fail)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let mut entry = EpochLog {
            epoch,
            train_loss,
            test_loss: None,
            test_conf_acc: None,
            test_type_acc: None,
            test_bound_loss_ms: None,
            test_time_f1: None,
            best_test_loss: 0.0,
        };
        let selection = if test.is_empty() {
            train_loss
        } else {
            let (l, records) = evaluate(&params, test, &cfg.loss)?;
            entry.test_loss = Some(l.total);
            entry.test_conf_acc = metrics::confidence_accuracy(&records).ok();
            entry.test_type_acc = metrics::type_accuracy(&records).ok().map(|t| t.macro_avg);
            entry.test_bound_loss_ms = metrics::bound_loss_ms(&records).ok();
            entry.test_time_f1 = metrics::time_f1(&records).ok();
            l.total
        };
        if selection < best_loss {
            best_loss = selection;
            best_epoch = epoch;
            best = params.clone();
        }
        entry.best_test_loss = best_loss;
        on_epoch(&entry, &params);
        log.push(entry);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-4;

/// A random column-stochastic input and one annotated event.
pub fn grad_check_fixture(model: &ModelConfig, seed: u64) -> (Vec<f64>, Vec<RegionTarget>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..model.c_max * model.t_max).map(|_| rng.gen_range(0.0..6.0)).collect();
    let a = normalize_alignment(&AlignmentMatrix::from_values(model.c_max, model.t_max, raw));
    let start = rng.gen_range(0..model.t_max - 1);
    let end = rng.gen_range(start + 1..=model.t_max);
    let ann = Annotation {
        dtype: crate::simulate::DysfluencyType::ALL[rng.gen_range(0..5)],
        level: crate::simulate::Level::Word,
        start_frame: start,
        end_frame: end,
    };
    let (_, targets) = assign_responsibility(&ann, model.t_max, model.t_max, model.regions()).expect("valid fixture");
    (a.values, targets)
}

/// Compares `analytic` against central differences of the loss at
/// `coords` sampled from `seed`.
pub fn compare_gradient(
    params: &ModelParams,
    input: &[f64],
    targets: &[RegionTarget],
    analytic: &[f64],
    coordinates: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, DetectorError> {
    let w = LossWeights::default();
    let eval = |q: &ModelParams| -> Result<f64, DetectorError> {
        let c = forward(q, input)?;
        Ok(yolo_loss_from_logits(&c.logits, targets, &w)?.0.total)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = analytic.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(coordinates.min(n));
    let mut worst = 0.0;
    let mut worst_coordinate = 0;
    let mut probe = params.clone();
    for &i in &idx {
        let orig = *probe.coord_mut(i);
        *probe.coord_mut(i) = orig + FD_STEP;
        let plus = eval(&probe)?;
        *probe.coord_mut(i) = orig - FD_STEP;
        let minus = eval(&probe)?;
        *probe.coord_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-7);
        let err = (analytic[i] - numeric).abs() / denom;
        if err > worst {
            worst = err;
            worst_coordinate = i;
        }
    }
    Ok(GradCheckReport {
        coordinates: idx.len(),
        max_rel_error: worst,
        worst_coordinate,
        tolerance,
        passed: worst < tolerance,
    })
}

/// Finite-difference check of the full detector gradient on a small model.
pub fn grad_check(model: ModelConfig, tolerance: f64, seed: u64) -> Result<GradCheckReport, DetectorError> {
    model.validate()?;
    let params = ModelParams::init(model, seed);
    let (input, targets) = grad_check_fixture(&model, mix_seed(seed, 1));
    let mut grads = params.zeros_like();
    loss_and_grad(&params, &input, &targets, &LossWeights::default(), 1.0, &mut grads)?;
    let coords = params.num_params().min(400).max(200);
    compare_gradient(&params, &input, &targets, &grads.flatten(), coords, tolerance, mix_seed(seed, 2))
}
