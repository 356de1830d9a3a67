use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::LAYER_NORM_EPS;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub struct NormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

/// Row-wise layer norm; returns the output and what the backward pass needs.
pub fn layer_norm(x: ArrayView2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, NormCache) {
    let n = x.nrows();
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(n);
    Zip::from(xhat.rows_mut()).and(&mut rstd).for_each(|mut row, r| {
        let mean = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / row.len() as f64;
        *r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    });
    let y = &xhat * &g + b;
    (y, NormCache { xhat, rstd })
}

/// Returns `dx`; accumulates into `dg` and `db`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    g: ArrayView1<f64>,
    cache: &NormCache,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(&dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let mut dx = &dy * &g;
    let h = dx.ncols() as f64;
    Zip::from(dx.rows_mut())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .for_each(|mut dxh, xh, &r| {
            let m1 = dxh.sum() / h;
            let m2 = dxh.dot(&xh) / h;
            Zip::from(&mut dxh)
                .and(&xh)
                .for_each(|d, &x| *d = r * (*d - m1 - x * m2));
        });
    dx
}
