//! Dense building blocks with hand-written backward passes.
//!
//! Activations are row-major `rows x features` matrices. Biases and layer-norm
//! gains are stored as `1 x features` matrices so every parameter is an `Array2`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::rng::Rng;
use rand::Rng as _;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn linear(x: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += &b.row(0);
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub(crate) fn linear_backward(
    x: ArrayView2<'_, f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    let mut db_row = db.row_mut(0);
    db_row += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
    let cols = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / cols;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    let mut y = &xhat * &gain.row(0);
    y += &bias.row(0);
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Array2<f64>,
    dy: &Array2<f64>,
    dgain: &mut Array2<f64>,
    dbias: &mut Array2<f64>,
) -> Array2<f64> {
    {
        let mut dg = dgain.row_mut(0);
        dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        let mut db = dbias.row_mut(0);
        db += &dy.sum_axis(Axis(0));
    }
    let cols = dy.ncols() as f64;
    let mut dx = dy * &gain.row(0);
    for ((mut row, xhat), &inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
        let mean_d = row.sum() / cols;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(d, x)| d * x).sum::<f64>() / cols;
        Zip::from(&mut row).and(&xhat).for_each(|d, &x| {
            *d = inv * (*d - mean_d - x * mean_dx);
        });
    }
    dx
}

pub(crate) fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

/// `dy * gelu'(x)`.
pub(crate) fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|d, &v| {
        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
        let grad = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *d *= grad;
    });
    out
}

pub(crate) fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub(crate) fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|d, &v| {
        let sig = 1.0 / (1.0 + (-v).exp());
        *d *= sig * (1.0 + v * (1.0 - sig));
    });
    out
}

/// Inverted-dropout mask, or `None` when `p == 0`.
pub(crate) fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Option<Array2<f64>> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { keep }))
}

/// Geometry of a stacked batch of equal-length sequences.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
}

/// Bidirectional multi-head attention over `qkv = [Q | K | V]`.
/// Returns the concatenated head outputs and the attention probabilities.
pub(crate) fn attention(qkv: &Array2<f64>, layout: SeqLayout) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d_model = qkv.ncols() / 3;
    let dh = d_model / layout.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = layout.seq_len;
    let mut out = Array2::zeros((qkv.nrows(), d_model));
    let mut probs = Vec::with_capacity(layout.batch * layout.heads);
    for b in 0..layout.batch {
        let rows = b * n..(b + 1) * n;
        for h in 0..layout.heads {
            let c = h * dh;
            let q = qkv.slice(s![rows.clone(), c..c + dh]);
            let k = qkv.slice(s![rows.clone(), d_model + c..d_model + c + dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d_model + c..2 * d_model + c + dh]);
            let mut p = q.dot(&k.t());
            for mut row in p.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                let mut sum = 0.0;
                row.mapv_inplace(|x| {
                    let e = (x * scale - max).exp();
                    sum += e;
                    e
                });
                row /= sum;
            }
            out.slice_mut(s![rows.clone(), c..c + dh]).assign(&p.dot(&v));
            probs.push(p);
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    qkv: &Array2<f64>,
    probs: &[Array2<f64>],
    dout: &Array2<f64>,
    layout: SeqLayout,
) -> Array2<f64> {
    let d_model = qkv.ncols() / 3;
    let dh = d_model / layout.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = layout.seq_len;
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    for b in 0..layout.batch {
        let rows = b * n..(b + 1) * n;
        for h in 0..layout.heads {
            let c = h * dh;
            let p = &probs[b * layout.heads + h];
            let q = qkv.slice(s![rows.clone(), c..c + dh]);
            let k = qkv.slice(s![rows.clone(), d_model + c..d_model + c + dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d_model + c..2 * d_model + c + dh]);
            let d_o = dout.slice(s![rows.clone(), c..c + dh]);
            let dv = p.t().dot(&d_o);
            let dp = d_o.dot(&v.t());
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                Zip::from(&mut ds_row).and(&p_row).for_each(|d, &pv| *d = pv * (*d - dot) * scale);
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![rows.clone(), c..c + dh]).assign(&dq);
            dqkv.slice_mut(s![rows.clone(), d_model + c..d_model + c + dh]).assign(&dk);
            dqkv.slice_mut(s![rows.clone(), 2 * d_model + c..2 * d_model + c + dh]).assign(&dv);
        }
    }
    dqkv
}

/// Sinusoidal embedding of integer timesteps, one row per timestep.
pub(crate) fn timestep_embedding(timesteps: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((timesteps.len(), dim));
    for (r, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[[r, i]] = arg.sin();
            out[[r, half + i]] = arg.cos();
        }
    }
    out
}
