//! Differentiable building blocks. Forward functions return whatever their
//! backward counterpart needs.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-row layer normalization with gain `g` and shift `b`.
pub fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dg, db)`.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: &LnCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(&cache.inv_std)
    {
        let m1 = row.sum() / d;
        let m2 = row.dot(&xh) / d;
        Zip::from(&mut row).and(&xh).for_each(|v, &x| *v = s * (*v - m1 - x * m2));
    }
    (dx, dg, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
}

pub fn gelu_backward(z: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(z).for_each(|d, &x| {
        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
        let dt = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt;
    });
    out
}

/// Row-wise softmax in place.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Gradient through a row-wise softmax with output `p`.
pub fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = dp.clone();
    for (mut d, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot = d.dot(&pr);
        Zip::from(&mut d).and(&pr).for_each(|x, &q| *x = q * (*x - dot));
    }
    ds
}

/// Scaled dot-product scores `Q Kᵀ / sqrt(d)` with `d` the column count.
pub fn attention_scores(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    q.dot(&k.t()) / (q.ncols() as f64).sqrt()
}

/// `A + alpha * C`.
pub fn biased_attention(a: &Array2<f64>, c_bias: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    if a.dim() != c_bias.dim() {
        return Err(Error::Shape {
            expected: a.dim(),
            got: c_bias.dim(),
        });
    }
    if !alpha.is_finite() {
        return Err(Error::invalid("alpha must be finite"));
    }
    Ok(a + &(c_bias * alpha))
}

/// Cos/sin tables for 2D axial rotary encoding. Within each head, the first
/// half of the dimensions rotates by the row index and the second half by
/// the column index; pairs are adjacent dimensions.
pub struct RopeTable {
    pub cos: Array2<f64>,
    pub sin: Array2<f64>,
}

impl RopeTable {
    pub fn new(positions: &[(usize, usize)], head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::invalid(format!(
                "head_dim {head_dim} must be a positive multiple of 4 for 2D rotary encoding"
            )));
        }
        let half = head_dim / 2;
        let per_axis = half / 2;
        let freqs: Vec<f64> = (0..per_axis)
            .map(|i| base.powf(-2.0 * i as f64 / half as f64))
            .collect();
        let mut cos = Array2::zeros((positions.len(), half));
        let mut sin = Array2::zeros((positions.len(), half));
        for (t, &(r, c)) in positions.iter().enumerate() {
            for (i, &f) in freqs.iter().enumerate() {
                let (sr, cr) = (r as f64 * f).sin_cos();
                let (sc, cc) = (c as f64 * f).sin_cos();
                cos[[t, i]] = cr;
                sin[[t, i]] = sr;
                cos[[t, per_axis + i]] = cc;
                sin[[t, per_axis + i]] = sc;
            }
        }
        Ok(RopeTable { cos, sin })
    }

    /// Rotates every head of `x` (T × heads·head_dim) in place; `inverse`
    /// applies the transpose rotation, which is also the backward pass.
    pub fn apply(&self, x: &mut Array2<f64>, heads: usize, inverse: bool) {
        let pairs = self.cos.ncols();
        let head_dim = 2 * pairs;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (t, mut row) in x.rows_mut().into_iter().enumerate() {
            for h in 0..heads {
                for p in 0..pairs {
                    let (c, s) = (self.cos[[t, p]], sign * self.sin[[t, p]]);
                    let i = h * head_dim + 2 * p;
                    let (a, b) = (row[i], row[i + 1]);
                    row[i] = a * c - b * s;
                    row[i + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Rotary encoding of per-token vectors (T × head_dim) at grid positions.
pub fn rope_encode(x: &Array2<f64>, positions: &[(usize, usize)], base: f64) -> Result<Array2<f64>> {
    if positions.len() != x.nrows() {
        return Err(Error::Shape {
            expected: (x.nrows(), x.ncols()),
            got: (positions.len(), x.ncols()),
        });
    }
    let table = RopeTable::new(positions, x.ncols(), base)?;
    let mut out = x.clone();
    table.apply(&mut out, 1, false);
    Ok(out)
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_loss(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean squared error over all entries.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = pred.len().max(1) as f64;
    Zip::from(pred)
        .and(target)
        .fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t))
        / n
}
