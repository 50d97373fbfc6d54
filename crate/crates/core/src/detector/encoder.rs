//! Temporal dependency extractor: pre-norm transformer encoder over the
//! `S` region tokens, each `c_max` wide.

use super::ops::{
    axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_in_place, LayerNormCache,
};
use super::params::{EncoderLayerParams, ModelParams};
use super::DetectorError;

pub struct LayerCache {
    pub input: Vec<f64>,
    pub ln1: LayerNormCache,
    pub u: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `H x S x S` attention weights.
    pub probs: Vec<f64>,
    pub attn: Vec<f64>,
    pub mid: Vec<f64>,
    pub ln2: LayerNormCache,
    pub u2: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

pub struct EncoderCache {
    pub layers: Vec<LayerCache>,
    /// `S x D` region embeddings (before the head's final norm).
    pub output: Vec<f64>,
}

impl EncoderCache {
    /// Attention weights of layer `l`, head `h`, query `i`.
    pub fn attention_row(&self, l: usize, h: usize, i: usize, s: usize) -> &[f64] {
        let base = (h * s + i) * s;
        &self.layers[l].probs[base..base + s]
    }
}

/// Sinusoidal position encoding, `S x D`.
pub fn positional_encoding(s: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; s * d];
    for pos in 0..s {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// `C x S` features → `S x C` tokens.
fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn layer_forward(p: &EncoderLayerParams, x: Vec<f64>, s: usize, d: usize, heads: usize, f: usize) -> (LayerCache, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (u, ln1) = layer_norm(&x, s, d, &p.ln1_gain.data, &p.ln1_bias.data);
    let q = linear(&u, s, &p.wq.data, &p.bq.data, d, d);
    let k = linear(&u, s, &p.wk.data, &p.bk.data, d, d);
    let v = linear(&u, s, &p.wv.data, &p.bv.data, d, d);
    let mut probs = vec![0.0; heads * s * s];
    let mut attn = vec![0.0; s * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..s {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut probs[(h * s + i) * s..(h * s + i + 1) * s];
            for j in 0..s {
                row[j] = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
            }
            softmax_in_place(row);
            let out = &mut attn[i * d + off..i * d + off + dh];
            for j in 0..s {
                axpy(row[j], &v[j * d + off..j * d + off + dh], out);
            }
        }
    }
    let proj = linear(&attn, s, &p.wo.data, &p.bo.data, d, d);
    let mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
    let (u2, ln2) = layer_norm(&mid, s, d, &p.ln2_gain.data, &p.ln2_bias.data);
    let hidden_pre = linear(&u2, s, &p.w1.data, &p.b1.data, d, f);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&z| gelu(z)).collect();
    let ff = linear(&hidden, s, &p.w2.data, &p.b2.data, f, d);
    let out: Vec<f64> = mid.iter().zip(&ff).map(|(a, b)| a + b).collect();
    (
        LayerCache {
            input: x,
            ln1,
            u,
            q,
            k,
            v,
            probs,
            attn,
            mid,
            ln2,
            u2,
            hidden_pre,
            hidden,
        },
        out,
    )
}

pub(super) fn forward(params: &ModelParams, features: &[f64], with_position: bool) -> EncoderCache {
    let cfg = &params.config;
    let (s, d) = (cfg.regions(), cfg.c_max);
    let mut x = transpose(features, d, s);
    let gain = (d as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= gain);
    if with_position {
        for (xi, pi) in x.iter_mut().zip(positional_encoding(s, d)) {
            *xi += pi;
        }
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for p in &params.layers {
        let (cache, out) = layer_forward(p, x, s, d, cfg.heads, cfg.ffn_dim);
        layers.push(cache);
        x = out;
    }
    EncoderCache { layers, output: x }
}

fn layer_backward(
    p: &EncoderLayerParams,
    c: &LayerCache,
    d_out: &[f64],
    g: &mut EncoderLayerParams,
    s: usize,
    d: usize,
    heads: usize,
    f: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    // feed-forward branch
    let d_hidden = linear_backward(&c.hidden, d_out, s, &p.w2.data, f, d, &mut g.w2.data, &mut g.b2.data);
    let d_hpre: Vec<f64> = d_hidden
        .iter()
        .zip(&c.hidden_pre)
        .map(|(dy, z)| dy * gelu_grad(*z))
        .collect();
    let d_u2 = linear_backward(&c.u2, &d_hpre, s, &p.w1.data, d, f, &mut g.w1.data, &mut g.b1.data);
    let d_mid_ln = layer_norm_backward(&c.ln2, &d_u2, s, d, &p.ln2_gain.data, &mut g.ln2_gain.data, &mut g.ln2_bias.data);
    let d_mid: Vec<f64> = d_out.iter().zip(&d_mid_ln).map(|(a, b)| a + b).collect();
    // attention branch
    let d_attn = linear_backward(&c.attn, &d_mid, s, &p.wo.data, d, d, &mut g.wo.data, &mut g.bo.data);
    let mut dq = vec![0.0; s * d];
    let mut dk = vec![0.0; s * d];
    let mut dv = vec![0.0; s * d];
    let mut dp = vec![0.0; s];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..s {
            let row = &c.probs[(h * s + i) * s..(h * s + i + 1) * s];
            let doi = &d_attn[i * d + off..i * d + off + dh];
            for j in 0..s {
                dp[j] = dot(doi, &c.v[j * d + off..j * d + off + dh]);
                axpy(row[j], doi, &mut dv[j * d + off..j * d + off + dh]);
            }
            let inner: f64 = row.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..s {
                let ds = row[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy(ds, &c.k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                axpy(ds, &c.q[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
            }
        }
    }
    let mut d_u = linear_backward(&c.u, &dq, s, &p.wq.data, d, d, &mut g.wq.data, &mut g.bq.data);
    let d_uk = linear_backward(&c.u, &dk, s, &p.wk.data, d, d, &mut g.wk.data, &mut g.bk.data);
    let d_uv = linear_backward(&c.u, &dv, s, &p.wv.data, d, d, &mut g.wv.data, &mut g.bv.data);
    for ((a, b), cc) in d_u.iter_mut().zip(&d_uk).zip(&d_uv) {
        *a += b + cc;
    }
    let d_x_ln = layer_norm_backward(&c.ln1, &d_u, s, d, &p.ln1_gain.data, &mut g.ln1_gain.data, &mut g.ln1_bias.data);
    d_mid.iter().zip(&d_x_ln).map(|(a, b)| a + b).collect()
}

/// Returns `d loss / d features` in the aggregator's `C x S` layout.
pub(super) fn backward(
    params: &ModelParams,
    cache: &EncoderCache,
    d_out: &[f64],
    grads: &mut ModelParams,
) -> Vec<f64> {
    let cfg = &params.config;
    let (s, d) = (cfg.regions(), cfg.c_max);
    let mut dx = d_out.to_vec();
    for (l, (p, c)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        dx = layer_backward(p, c, &dx, &mut grads.layers[l], s, d, cfg.heads, cfg.ffn_dim);
    }
    // position encoding is constant; undo the entry gain and transpose
    let gain = (d as f64).sqrt();
    dx.iter_mut().for_each(|v| *v *= gain);
    transpose(&dx, s, d)
}

/// Encodes a `c_max x S` feature map into `S x c_max` region embeddings.
/// Tokens are scaled by `sqrt(c_max)` before the position encoding is added.
pub fn temporal_extract(
    features: &[f64],
    params: &ModelParams,
    with_position: bool,
) -> Result<(Vec<f64>, EncoderCache), DetectorError> {
    let cfg = &params.config;
    let expected = cfg.c_max * cfg.regions();
    if features.len() != expected {
        return Err(DetectorError::ShapeMismatch {
            expected: format!("{}x{}", cfg.c_max, cfg.regions()),
            got: format!("{} values", features.len()),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(DetectorError::NumericalError("features".into()));
    }
    let cache = forward(params, features, with_position);
    Ok((cache.output.clone(), cache))
}
