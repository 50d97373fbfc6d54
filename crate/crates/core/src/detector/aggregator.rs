//! Spatial feature aggregator.
//!
//! Each block: depthwise conv along time (zero padded, stride 1), grouped
//! 1x1 conv mixing channels inside each group, per-channel scale/shift,
//! GELU, then average pooling of adjacent frame pairs.

use super::ops::{axpy, dot, gelu, gelu_grad};
use super::params::{ConvBlockParams, ModelParams};
use super::{DetectorError, ModelConfig};
use crate::align::AlignmentMatrix;

pub struct BlockCache {
    pub input: Vec<f64>,
    pub len: usize,
    pub dw_out: Vec<f64>,
    pub group_out: Vec<f64>,
    pub pre_act: Vec<f64>,
}

pub struct AggregatorCache {
    pub blocks: Vec<BlockCache>,
    /// `C x S` output features.
    pub output: Vec<f64>,
}

fn depthwise(x: &[f64], c: usize, len: usize, p: &ConvBlockParams, k: usize) -> Vec<f64> {
    let half = k / 2;
    let mut out = vec![0.0; c * len];
    for ch in 0..c {
        let xr = &x[ch * len..(ch + 1) * len];
        let or = &mut out[ch * len..(ch + 1) * len];
        or.iter_mut().for_each(|v| *v = p.dw_bias.data[ch]);
        for j in 0..k {
            let w = p.dw_weight.data[ch * k + j];
            // out[t] += w * x[t + j - half]
            let shift = j as isize - half as isize;
            let (t0, t1) = if shift < 0 {
                ((-shift) as usize, len)
            } else {
                (0, len.saturating_sub(shift as usize))
            };
            if t0 >= t1 {
                continue;
            }
            let src0 = (t0 as isize + shift) as usize;
            axpy(w, &xr[src0..src0 + (t1 - t0)], &mut or[t0..t1]);
        }
    }
    out
}

fn grouped(a: &[f64], c: usize, len: usize, p: &ConvBlockParams, groups: usize) -> Vec<f64> {
    let gsize = c / groups;
    let mut out = vec![0.0; c * len];
    for ch in 0..c {
        let g0 = (ch / gsize) * gsize;
        let or = &mut out[ch * len..(ch + 1) * len];
        for j in 0..gsize {
            let w = p.group_weight.data[ch * gsize + j];
            axpy(w, &a[(g0 + j) * len..(g0 + j + 1) * len], or);
        }
    }
    out
}

pub(super) fn forward(params: &ModelParams, input: &[f64]) -> AggregatorCache {
    let cfg = &params.config;
    let c = cfg.c_max;
    let mut x = input.to_vec();
    let mut len = cfg.t_max;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for p in &params.blocks {
        let dw_out = depthwise(&x, c, len, p, cfg.kernel);
        let group_out = grouped(&dw_out, c, len, p, cfg.groups);
        let mut pre_act = vec![0.0; c * len];
        let half = len / 2;
        let mut y = vec![0.0; c * half];
        for ch in 0..c {
            let (s, b) = (p.scale.data[ch], p.shift.data[ch]);
            for t in 0..len {
                pre_act[ch * len + t] = s * group_out[ch * len + t] + b;
            }
            for t in 0..half {
                let a = gelu(pre_act[ch * len + 2 * t]);
                let bb = gelu(pre_act[ch * len + 2 * t + 1]);
                y[ch * half + t] = 0.5 * (a + bb);
            }
        }
        blocks.push(BlockCache {
            input: std::mem::replace(&mut x, y),
            len,
            dw_out,
            group_out,
            pre_act,
        });
        len = half;
    }
    AggregatorCache { blocks, output: x }
}

pub(super) fn backward(
    params: &ModelParams,
    cache: &AggregatorCache,
    d_out: &[f64],
    grads: &mut ModelParams,
) {
    let cfg = &params.config;
    let c = cfg.c_max;
    let k = cfg.kernel;
    let gsize = c / cfg.groups;
    let mut dy = d_out.to_vec();
    for (bi, (p, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let g = &mut grads.blocks[bi];
        let len = bc.len;
        let half = len / 2;
        // pooling + GELU + scale/shift
        let mut dg = vec![0.0; c * len];
        for ch in 0..c {
            let s = p.scale.data[ch];
            let mut ds = 0.0;
            let mut db = 0.0;
            for t in 0..half {
                let (i0, i1) = (ch * len + 2 * t, ch * len + 2 * t + 1);
                for i in [i0, i1] {
                    let dz = 0.5 * dy[ch * half + t] * gelu_grad(bc.pre_act[i]);
                    ds += dz * bc.group_out[i];
                    db += dz;
                    dg[i] = dz * s;
                }
            }
            g.scale.data[ch] += ds;
            g.shift.data[ch] += db;
        }
        // grouped conv
        let mut da = vec![0.0; c * len];
        for ch in 0..c {
            let g0 = (ch / gsize) * gsize;
            let dgr = &dg[ch * len..(ch + 1) * len];
            for j in 0..gsize {
                let src = &bc.dw_out[(g0 + j) * len..(g0 + j + 1) * len];
                g.group_weight.data[ch * gsize + j] += dot(dgr, src);
                axpy(p.group_weight.data[ch * gsize + j], dgr, &mut da[(g0 + j) * len..(g0 + j + 1) * len]);
            }
        }
        // depthwise conv
        let need_dx = bi > 0;
        let mut dx = if need_dx { vec![0.0; c * len] } else { Vec::new() };
        let halfk = k / 2;
        for ch in 0..c {
            let dar = &da[ch * len..(ch + 1) * len];
            let xr = &bc.input[ch * len..(ch + 1) * len];
            g.dw_bias.data[ch] += dar.iter().sum::<f64>();
            for j in 0..k {
                let shift = j as isize - halfk as isize;
                let (t0, t1) = if shift < 0 {
                    ((-shift) as usize, len)
                } else {
                    (0, len.saturating_sub(shift as usize))
                };
                if t0 >= t1 {
                    continue;
                }
                let src0 = (t0 as isize + shift) as usize;
                let n = t1 - t0;
                g.dw_weight.data[ch * k + j] += dot(&dar[t0..t1], &xr[src0..src0 + n]);
                if need_dx {
                    let w = p.dw_weight.data[ch * k + j];
                    axpy(w, &dar[t0..t1], &mut dx[ch * len + src0..ch * len + src0 + n]);
                }
            }
        }
        dy = dx;
    }
}

/// Runs the aggregator alone, returning the `c_max x S` feature map.
pub fn spatial_aggregate(a: &AlignmentMatrix, params: &ModelParams) -> Result<Vec<f64>, DetectorError> {
    let ModelConfig { c_max, t_max, .. } = params.config;
    if a.rows != c_max || a.cols != t_max {
        return Err(DetectorError::ShapeMismatch {
            expected: format!("{c_max}x{t_max}"),
            got: format!("{}x{}", a.rows, a.cols),
        });
    }
    Ok(forward(params, &a.values).output)
}
