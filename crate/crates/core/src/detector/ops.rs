//! Dense kernels shared by the detector stages. Matrices are row-major.

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
pub const LN_EPS: f64 = 1e-5;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = x W^T + b` with `x: n x d_in`, `W: d_out x d_in`.
pub fn linear(x: &[f64], n: usize, w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * d_out];
    for i in 0..n {
        let xi = &x[i * d_in..(i + 1) * d_in];
        let yi = &mut y[i * d_out..(i + 1) * d_out];
        for o in 0..d_out {
            yi[o] = b[o] + dot(xi, &w[o * d_in..(o + 1) * d_in]);
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dW`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    w: &[f64],
    d_in: usize,
    d_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d_in];
    for i in 0..n {
        let xi = &x[i * d_in..(i + 1) * d_in];
        let dyi = &dy[i * d_out..(i + 1) * d_out];
        let dxi = &mut dx[i * d_in..(i + 1) * d_in];
        for o in 0..d_out {
            let g = dyi[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            axpy(g, xi, &mut dw[o * d_in..(o + 1) * d_in]);
            axpy(g, &w[o * d_in..(o + 1) * d_in], dxi);
        }
    }
    dx
}

/// Per-row layer norm statistics kept for the backward pass.
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], n: usize, d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = gain[j] * h + bias[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    dy: &[f64],
    n: usize,
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyi[j] * xh[j];
            dbias[j] += dyi[j];
            dxhat[j] = dyi[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-4.0, -1.3, -0.2, 0.0, 0.4, 1.7, 3.5] {
            assert!((gelu_grad(x) - central(gelu, x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn affine_layer_gradient_is_closed_form() {
        // y = x W^T + b, L = sum(y * c)  =>  dW = c^T x, db = sum c, dx = c W
        let x = [1.0, 2.0, -1.0, 0.5];
        let w = [0.3, -0.2, 0.1, 0.4, 0.0, 1.0];
        let c = [1.0, -2.0, 0.5, 3.0, 1.0, -1.0];
        let mut dw = [0.0; 6];
        let mut db = [0.0; 3];
        let dx = linear_backward(&x, &c, 2, &w, 2, 3, &mut dw, &mut db);
        assert_eq!(db, [4.0, -1.0, -0.5]);
        assert_eq!(dw, [1.0 * 1.0 + 3.0 * -1.0, 1.0 * 2.0 + 3.0 * 0.5, -2.0 * 1.0 + 1.0 * -1.0, -2.0 * 2.0 + 0.5, 0.5 * 1.0 + 1.0, 0.5 * 2.0 - 0.5]);
        assert_eq!(dx[0], 1.0 * 0.3 - 2.0 * 0.1 + 0.5 * 0.0);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = vec![0.3, -1.2, 2.0, 0.7, 1.1, -0.4];
        let gain = vec![1.2, 0.8, -0.5];
        let bias = vec![0.1, 0.0, 0.3];
        let c = vec![0.7, -0.3, 1.5, 0.2, 0.9, -1.1];
        let f = |x: &[f64]| dot(&layer_norm(x, 2, 3, &gain, &bias).0, &c);
        let (_, cache) = layer_norm(&x, 2, 3, &gain, &bias);
        let mut dg = vec![0.0; 3];
        let mut db = vec![0.0; 3];
        let dx = layer_norm_backward(&cache, &c, 2, 3, &gain, &mut dg, &mut db);
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += 1e-6;
            let mut m = x.clone();
            m[i] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - dx[i]).abs() < 1e-7, "{i}: {num} vs {}", dx[i]);
        }
    }
}
