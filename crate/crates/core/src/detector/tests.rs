use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::align::AlignmentMatrix;
use crate::simulate::{Annotation, DysfluencyType, Level};

fn random_input(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.c_max * cfg.t_max).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn ann(s: usize, e: usize) -> Annotation {
    Annotation {
        dtype: DysfluencyType::Block,
        level: Level::Word,
        start_frame: s,
        end_frame: e,
    }
}

#[test]
fn responsibility_arithmetic() {
    let (r, t) = assign_responsibility(&ann(256, 320), 1024, 1024, 16).unwrap();
    assert_eq!(r, 4);
    assert_eq!(t[4].b_start, 0.25);
    assert_eq!(t[4].b_end, 0.3125);
    assert_eq!(t.iter().filter(|t| t.has_dysfluency).count(), 1);
    assert_eq!(t[4].class(), Some(DysfluencyType::Block));

    let (r, _) = assign_responsibility(&ann(0, 1), 10, 1024, 16).unwrap();
    assert_eq!(r, 0);
    // midpoint 128.0 sits on the 64-frame grid: floor puts it in region 2
    let (r, _) = assign_responsibility(&ann(100, 156), 200, 1024, 16).unwrap();
    assert_eq!(r, 2);
    assert!(matches!(
        assign_responsibility(&ann(5, 30), 20, 1024, 16),
        Err(DetectorError::OutOfRange { .. })
    ));
}

#[test]
fn zero_head_gives_neutral_predictions() {
    let cfg = ModelConfig::miniature();
    let mut p = ModelParams::init(cfg, 1);
    p.head.weight.data.iter_mut().for_each(|v| *v = 0.0);
    let emb = vec![0.0; cfg.regions() * cfg.c_max];
    for pred in predict_regions(&emb, &p).unwrap() {
        assert_eq!(pred.confidence, 0.5);
        assert_eq!(pred.b_start, 0.5);
        assert_eq!(pred.b_end, 0.5);
        assert!(pred.class_probs.iter().all(|&c| (c - 0.2).abs() < 1e-15));
    }
}

#[test]
fn predictions_respect_ranges() {
    let cfg = ModelConfig::miniature();
    let p = ModelParams::init(cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let emb: Vec<f64> = (0..cfg.regions() * cfg.c_max).map(|_| rng.gen_range(-20.0..20.0)).collect();
        for pred in predict_regions(&emb, &p).unwrap() {
            assert!(pred.confidence > 0.0 && pred.confidence < 1.0);
            assert!(pred.b_start > 0.0 && pred.b_start < 1.0);
            assert!(pred.b_end > 0.0 && pred.b_end < 1.0);
            assert!((pred.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(pred.class_probs.iter().all(|&c| c >= 0.0));
        }
    }
}

#[test]
fn aggregator_output_shape_and_zero_input() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.regions(), 16);
    assert_eq!(cfg.t_max >> 6, 16);
    let p = ModelParams::init(cfg, 0);
    let a = AlignmentMatrix::zeros(cfg.c_max, cfg.t_max);
    let f = spatial_aggregate(&a, &p).unwrap();
    assert_eq!(f.len(), cfg.c_max * 16);
    // zero input, zero biases: every feature is GELU(0) = 0
    assert!(f.iter().all(|v| v.is_finite() && *v == 0.0));
    let wrong = AlignmentMatrix::zeros(cfg.c_max, 512);
    assert!(matches!(spatial_aggregate(&wrong, &p), Err(DetectorError::ShapeMismatch { .. })));
}

#[test]
fn aggregator_reacts_to_every_kernel_weight() {
    let cfg = ModelConfig::miniature();
    let p = ModelParams::init(cfg, 5);
    let input = random_input(&cfg, 6);
    let a = AlignmentMatrix::from_values(cfg.c_max, cfg.t_max, input);
    let base = spatial_aggregate(&a, &p).unwrap();
    for b in 0..cfg.blocks {
        for i in 0..p.blocks[b].dw_weight.len() {
            let mut q = p.clone();
            q.blocks[b].dw_weight.data[i] += 1e-3;
            let out = spatial_aggregate(&a, &q).unwrap();
            let change = out.iter().zip(&base).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(change > 0.0, "block {b} weight {i} has no effect");
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::miniature();
    let p = ModelParams::init(cfg, 7);
    let feats: Vec<f64> = random_input(&cfg, 8)[..cfg.c_max * cfg.regions()].to_vec();
    let (_, cache) = temporal_extract(&feats, &p, true).unwrap();
    let s = cfg.regions();
    for h in 0..cfg.heads {
        for i in 0..s {
            let row = cache.attention_row(0, h, i, s);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn swap_regions(x: &[f64], rows: usize, cols: usize, a: usize, b: usize) -> Vec<f64> {
    // x is rows x cols with regions along cols
    let mut y = x.to_vec();
    for r in 0..rows {
        y.swap(r * cols + a, r * cols + b);
    }
    y
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let cfg = ModelConfig::miniature();
    let p = ModelParams::init(cfg, 9);
    let (d, s) = (cfg.c_max, cfg.regions());
    let feats: Vec<f64> = random_input(&cfg, 10)[..d * s].to_vec();
    let swapped = swap_regions(&feats, d, s, 0, 2);
    let (out, _) = temporal_extract(&feats, &p, false).unwrap();
    let (out_sw, _) = temporal_extract(&swapped, &p, false).unwrap();
    // output tokens are S x D: token 0 and 2 swap
    for j in 0..d {
        assert!((out[j] - out_sw[2 * d + j]).abs() < 1e-12);
        assert!((out[2 * d + j] - out_sw[j]).abs() < 1e-12);
        assert!((out[d + j] - out_sw[d + j]).abs() < 1e-12);
    }
    let (pe, _) = temporal_extract(&feats, &p, true).unwrap();
    let (pe_sw, _) = temporal_extract(&swapped, &p, true).unwrap();
    let broken = (0..d).any(|j| (pe[j] - pe_sw[2 * d + j]).abs() > 1e-6);
    assert!(broken);
}

fn targets_for(cfg: &ModelConfig) -> Vec<RegionTarget> {
    let rf = cfg.region_frames();
    let a = Annotation {
        dtype: DysfluencyType::Missing,
        level: Level::Phoneme,
        start_frame: rf + 1,
        end_frame: rf + 3,
    };
    assign_responsibility(&a, cfg.t_max, cfg.t_max, cfg.regions()).unwrap().1
}

#[test]
fn loss_hand_oracle_two_regions() {
    // independent arithmetic:
    // bound 5 * 1/2 * ((.25-.5)^2 + (.3-.5)^2) = 0.25625
    // conf  1/2 * 2 ln 2                       = 0.6931471805599453
    // class 0.5 * 1/2 * ln 5                   = 0.40235947810852507
    let neutral = RegionPrediction::from_logits(&[0.0; OUTPUTS]);
    let preds = vec![neutral.clone(), neutral];
    let mut onehot = [0.0; 5];
    onehot[0] = 1.0;
    let targets = vec![
        RegionTarget {
            has_dysfluency: true,
            class_onehot: onehot,
            b_start: 0.25,
            b_end: 0.30,
        },
        RegionTarget::fluent(),
    ];
    let (l, _) = yolo_loss(&preds, &targets, &LossWeights::default()).unwrap();
    assert!((l.bound - 0.25625).abs() < 1e-12);
    assert!((l.conf - 0.6931471805599453).abs() < 1e-12);
    assert!((l.class - 0.40235947810852507).abs() < 1e-12);
    assert!((l.total - 1.3517566586684704).abs() < 1e-12);

    let doubled = LossWeights {
        bound: 10.0,
        ..LossWeights::default()
    };
    let (l2, _) = yolo_loss(&preds, &targets, &doubled).unwrap();
    assert!((l2.bound - 2.0 * l.bound).abs() < 1e-12);
    assert_eq!(l2.conf, l.conf);
    assert_eq!(l2.class, l.class);
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn perfect_prediction_limit() {
    let cfg = ModelConfig::default();
    let targets = targets_for(&cfg);
    let mut logits = vec![0.0; targets.len() * OUTPUTS];
    for (i, t) in targets.iter().enumerate() {
        let l = &mut logits[i * OUTPUTS..(i + 1) * OUTPUTS];
        l[0] = if t.has_dysfluency { 40.0 } else { -40.0 };
        if t.has_dysfluency {
            for k in 0..5 {
                l[1 + k] = if t.class_onehot[k] == 1.0 { 40.0 } else { 0.0 };
            }
            l[6] = logit(t.b_start);
            l[7] = logit(t.b_end);
        }
    }
    let (l, grad) = yolo_loss_from_logits(&logits, &targets, &LossWeights::default()).unwrap();
    assert!(l.bound < 1e-20 && l.conf < 1e-12 && l.class < 1e-12);
    assert!(grad.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn class_term_is_zero_without_dysfluency() {
    let targets = vec![RegionTarget::fluent(); 4];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..4 * OUTPUTS).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let (l, grad) = yolo_loss_from_logits(&logits, &targets, &LossWeights::default()).unwrap();
    assert_eq!(l.class, 0.0);
    assert_eq!(l.bound, 0.0);
    for i in 0..4 {
        assert!(grad[i * OUTPUTS + 1..(i + 1) * OUTPUTS].iter().all(|&g| g == 0.0));
    }
}

#[test]
fn non_finite_logits_are_rejected() {
    let targets = vec![RegionTarget::fluent(); 2];
    let mut logits = vec![0.0; 2 * OUTPUTS];
    logits[3] = f64::NAN;
    assert!(matches!(
        yolo_loss_from_logits(&logits, &targets, &LossWeights::default()),
        Err(DetectorError::NumericalError(_))
    ));
}

#[test]
fn loss_gradient_wrt_logits_matches_finite_differences() {
    let cfg = ModelConfig::miniature();
    let targets = targets_for(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits: Vec<f64> = (0..targets.len() * OUTPUTS).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let w = LossWeights::default();
    let (_, grad) = yolo_loss_from_logits(&logits, &targets, &w).unwrap();
    for i in 0..logits.len() {
        let mut p = logits.clone();
        p[i] += 1e-6;
        let mut m = logits.clone();
        m[i] -= 1e-6;
        let num = (yolo_loss_from_logits(&p, &targets, &w).unwrap().0.total
            - yolo_loss_from_logits(&m, &targets, &w).unwrap().0.total)
            / 2e-6;
        assert!((num - grad[i]).abs() < 1e-8, "{i}");
    }
}

#[test]
fn zero_loss_sample_has_zero_gradients() {
    // a head that already predicts the targets perfectly yields vanishing grads
    let cfg = ModelConfig::miniature();
    let mut p = ModelParams::init(cfg, 4);
    let targets = vec![RegionTarget::fluent(); cfg.regions()];
    p.head.weight.data.iter_mut().for_each(|v| *v = 0.0);
    p.head.bias.data[0] = -60.0;
    let mut g = p.zeros_like();
    let l = loss_and_grad(&p, &random_input(&cfg, 1), &targets, &LossWeights::default(), 1.0, &mut g).unwrap();
    assert!(l.total < 1e-20);
    assert!(g.flatten().iter().all(|v| v.abs() < 1e-20));
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = ModelConfig::miniature();
    let p = ModelParams::init(cfg, 21);
    let input = random_input(&cfg, 22);
    let targets = targets_for(&cfg);
    let w = LossWeights::default();
    let mut g = p.zeros_like();
    loss_and_grad(&p, &input, &targets, &w, 1.0, &mut g).unwrap();
    let analytic = g.flatten();
    let eval = |q: &ModelParams| {
        let c = forward(q, &input).unwrap();
        yolo_loss_from_logits(&c.logits, &targets, &w).unwrap().0.total
    };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = analytic.len();
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let i = rng.gen_range(0..n);
        let mut plus = p.clone();
        *plus.coord_mut(i) += 1e-5;
        let mut minus = p.clone();
        *minus.coord_mut(i) -= 1e-5;
        let num = (eval(&plus) - eval(&minus)) / 2e-5;
        let err = (num - analytic[i]).abs() / analytic[i].abs().max(num.abs()).max(1e-6);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn checkpoint_roundtrip() {
    let cfg = ModelConfig::miniature();
    let p = ModelParams::init(cfg, 30);
    let mut bytes = Vec::new();
    write_checkpoint(&p, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"YSTD");
    let q = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(q.config, cfg);
    for (a, b) in p.flatten().iter().zip(q.flatten()) {
        assert_eq!(*a as f32 as f64, b);
    }
    bytes[0] = b'X';
    assert!(matches!(read_checkpoint(bytes.as_slice()), Err(DetectorError::Checkpoint(_))));
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig::miniature().validate().is_ok());
    let bad = ModelConfig {
        groups: 3,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        t_max: 1000,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}
