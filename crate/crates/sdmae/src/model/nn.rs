//! Dense-layer primitives with hand-written backward passes: per-token
//! linear maps (pointwise convolutions over the token grid), layer norm,
//! GELU, softmax, and the transformer block built from them.

use ndarray::{Array1, Array2, Axis};

pub const LN_EPS: f64 = 1e-5;

/// y = x w + b over rows of x.
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Returns (dx, dw, db) for y = x w + b.
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = d_out.dot(&w.t());
    let dw = x.t().dot(d_out);
    let db = d_out.sum_axis(Axis(0));
    (dx, dw, db)
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer normalization with affine scale/shift.
pub fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let n = x.nrows();
    let d = x.ncols();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (x[(i, j)] - mean) * is;
            xhat[(i, j)] = xh;
            out[(i, j)] = gamma[j] * xh + beta[j];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Array1<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (n, d) = (d_out.nrows(), d_out.ncols());
    let mut dx = Array2::zeros((n, d));
    let mut dgamma = Array1::zeros(d);
    let mut dbeta = Array1::zeros(d);
    for i in 0..n {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = d_out[(i, j)] * gamma[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * cache.xhat[(i, j)];
            dgamma[j] += d_out[(i, j)] * cache.xhat[(i, j)];
            dbeta[j] += d_out[(i, j)];
        }
        let scale = cache.inv_std[i] / d as f64;
        for j in 0..d {
            let dxh = d_out[(i, j)] * gamma[j];
            dx[(i, j)] =
                scale * (d as f64 * dxh - sum_dxhat - cache.xhat[(i, j)] * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

/// Smooth GELU (tanh approximation).
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

/// Elementwise derivative of the tanh-approximated GELU.
pub fn gelu_backward(x: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
    let mut dx = d_out.clone();
    for (g, &v) in dx.iter_mut().zip(x.iter()) {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        *g *= d;
    }
    dx
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward through a row-wise softmax with probabilities `p`.
pub fn softmax_rows_backward(p: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
    let (n, d) = (p.nrows(), p.ncols());
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let dot: f64 = (0..d).map(|j| d_out[(i, j)] * p[(i, j)]).sum();
        for j in 0..d {
            dx[(i, j)] = p[(i, j)] * (d_out[(i, j)] - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function over an array.
    fn fd_grad<F: FnMut(&Array2<f64>) -> f64>(
        x: &Array2<f64>,
        mut f: F,
        step: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += step;
            minus.as_slice_mut().unwrap()[idx] -= step;
            g.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        g
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let gamma = Array1::from_shape_fn(6, |_| rng.gen_range(0.5..1.5));
        let beta = Array1::from_shape_fn(6, |_| rng.gen_range(-0.5..0.5));
        // scalar loss: weighted sum of the output
        let wts = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let loss = |x: &Array2<f64>| (layer_norm(x, &gamma, &beta).0 * &wts).sum();
        let (_, cache) = layer_norm(&x, &gamma, &beta);
        let (dx, _, _) = layer_norm_backward(&cache, &gamma, &wts);
        let fd = fd_grad(&x, loss, 1e-5);
        for (a, b) in dx.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn gelu_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-2.0..2.0));
        let wts = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let dx = gelu_backward(&x, &wts);
        let fd = fd_grad(&x, |x| (gelu(x) * &wts).sum(), 1e-5);
        for (a, b) in dx.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let wts = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let p = softmax_rows(&x);
        let dx = softmax_rows_backward(&p, &wts);
        let fd = fd_grad(&x, |x| (softmax_rows(x) * &wts).sum(), 1e-6);
        for (a, b) in dx.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let b = arr1(&[0.1, -0.2]);
        let wts = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let (dx, dw, db) = linear_backward(&x, &w, &wts);
        let fd_x = fd_grad(&x, |x| (linear(x, &w, &b) * &wts).sum(), 1e-6);
        for (a, b) in dx.iter().zip(fd_x.iter()) {
            assert!(rel_err(*a, *b) < 1e-6);
        }
        let fd_w = fd_grad(&w, |w| (linear(&x, w, &b) * &wts).sum(), 1e-6);
        for (a, b) in dw.iter().zip(fd_w.iter()) {
            assert!(rel_err(*a, *b) < 1e-6);
        }
        assert!((db[0] - wts.column(0).sum()).abs() < 1e-12);
    }
}
