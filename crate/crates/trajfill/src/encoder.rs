//! Transformer encoder stack: scaled dot-product attention, multi-head
//! projection, GELU feed-forward, residuals and layer norm (post-norm), with
//! a hand-written backward pass for every piece.
//!
//! Padded key positions are excluded by overwriting their scores with a large
//! negative constant before the softmax; the resulting weights underflow to
//! exactly zero, so pad content can never leak into unpadded outputs.

use crate::error::{Error, Result};
use crate::linalg::{add_scaled, dot, Mat};
use crate::rng::Rng;

/// Score assigned to padded keys before the softmax.
pub const MASKED_SCORE: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// One encoder layer's tensors. Attention projections carry no bias; the
/// feed-forward sublayer does.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub ff1_w: Mat,
    pub ff1_b: Mat,
    pub ff2_w: Mat,
    pub ff2_b: Mat,
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
}

pub(crate) fn uniform_mat(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.uniform(-bound, bound);
    }
    m
}

impl LayerParams {
    pub fn init(d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        let attn_bound = 1.0 / (d as f64).sqrt();
        let ff2_bound = 1.0 / (d_ff as f64).sqrt();
        let mut ones = Mat::zeros(1, d);
        ones.fill(1.0);
        LayerParams {
            w_q: uniform_mat(d, d, attn_bound, rng),
            w_k: uniform_mat(d, d, attn_bound, rng),
            w_v: uniform_mat(d, d, attn_bound, rng),
            w_o: uniform_mat(d, d, attn_bound, rng),
            ff1_w: uniform_mat(d, d_ff, attn_bound, rng),
            ff1_b: Mat::zeros(1, d_ff),
            ff2_w: uniform_mat(d_ff, d, ff2_bound, rng),
            ff2_b: Mat::zeros(1, d),
            ln1_g: ones.clone(),
            ln1_b: Mat::zeros(1, d),
            ln2_g: ones,
            ln2_b: Mat::zeros(1, d),
        }
    }

    pub fn zeros(d: usize, d_ff: usize) -> Self {
        LayerParams {
            w_q: Mat::zeros(d, d),
            w_k: Mat::zeros(d, d),
            w_v: Mat::zeros(d, d),
            w_o: Mat::zeros(d, d),
            ff1_w: Mat::zeros(d, d_ff),
            ff1_b: Mat::zeros(1, d_ff),
            ff2_w: Mat::zeros(d_ff, d),
            ff2_b: Mat::zeros(1, d),
            ln1_g: Mat::zeros(1, d),
            ln1_b: Mat::zeros(1, d),
            ln2_g: Mat::zeros(1, d),
            ln2_b: Mat::zeros(1, d),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("ff1_w", &mut self.ff1_w),
            ("ff1_b", &mut self.ff1_b),
            ("ff2_w", &mut self.ff2_w),
            ("ff2_b", &mut self.ff2_b),
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
        ]
    }
}

/// Numerically stable softmax over a row, in place.
fn softmax_row(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in xs.iter_mut() {
        *x *= inv;
    }
}

fn check_pad(pad: &[f64], n: usize) -> Result<()> {
    if pad.len() != n {
        return Err(Error::data(format!("pad mask length {} != {} keys", pad.len(), n)));
    }
    Ok(())
}

fn pad_to_f64(pad: &[bool]) -> Vec<f64> {
    pad.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
}

/// Scaled dot-product attention over full matrices. `pad_keys[j]` marks key
/// `j` excluded; its weight is exactly zero. Rejects non-finite inputs.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, pad_keys: &[bool]) -> Result<Mat> {
    Ok(attention_with_weights(q, k, v, pad_keys)?.0)
}

/// As [`attention`], also returning the (n_q x n_k) weight matrix.
pub fn attention_with_weights(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    pad_keys: &[bool],
) -> Result<(Mat, Mat)> {
    if q.cols() != k.cols() {
        return Err(Error::data(format!(
            "query width {} != key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::data(format!(
            "key count {} != value count {}",
            k.rows(),
            v.rows()
        )));
    }
    check_pad(&pad_to_f64(pad_keys), k.rows())?;
    if !(q.is_finite() && k.is_finite() && v.is_finite()) {
        return Err(Error::numerical("attention inputs contain NaN or Inf"));
    }
    if pad_keys.iter().all(|&p| p) {
        return Err(Error::numerical("attention with every key padded"));
    }
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut weights = Mat::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        let row = weights.row_mut(i);
        for (j, w) in row.iter_mut().enumerate() {
            *w = if pad_keys[j] { MASKED_SCORE } else { dot(qi, k.row(j)) * scale };
        }
        softmax_row(row);
    }
    let mut out = Mat::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        for j in 0..k.rows() {
            let w = weights.at(i, j);
            if w != 0.0 {
                add_scaled(out.row_mut(i), v.row(j), w);
            }
        }
    }
    Ok((out, weights))
}

/// Multi-head attention: h parallel heads over learned projections of `x`,
/// concatenated and projected by `w_o`.
pub fn multi_head(x: &Mat, p: &LayerParams, heads: usize, pad: &[bool]) -> Result<Mat> {
    let (out, _) = multi_head_cached(x, p, heads, pad)?;
    Ok(out)
}

struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    /// One (n x n) weight matrix per head.
    weights: Vec<Mat>,
    ctx: Mat,
}

fn multi_head_cached(
    x: &Mat,
    p: &LayerParams,
    heads: usize,
    pad: &[bool],
) -> Result<(Mat, AttnCache)> {
    let d = x.cols();
    if p.w_q.rows() != d || heads == 0 || d % heads != 0 {
        return Err(Error::data(format!(
            "multi_head shape mismatch: d={d}, w_q rows={}, heads={heads}",
            p.w_q.rows()
        )));
    }
    if pad.len() != x.rows() {
        return Err(Error::data("pad mask length != sequence length"));
    }
    if pad.iter().all(|&p| p) {
        return Err(Error::numerical("multi_head with every position padded"));
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let n = x.rows();
    let q = x.matmul(&p.w_q);
    let k = x.matmul(&p.w_k);
    let v = x.matmul(&p.w_v);
    let mut ctx = Mat::zeros(n, d);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * dk;
        let hi = lo + dk;
        let mut w = Mat::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[lo..hi];
            let row = w.row_mut(i);
            for (j, wj) in row.iter_mut().enumerate() {
                *wj = if pad[j] {
                    MASKED_SCORE
                } else {
                    dot(qi, &k.row(j)[lo..hi]) * scale
                };
            }
            softmax_row(row);
        }
        for i in 0..n {
            for j in 0..n {
                let wij = w.at(i, j);
                if wij != 0.0 {
                    add_scaled(&mut ctx.row_mut(i)[lo..hi], &v.row(j)[lo..hi], wij);
                }
            }
        }
        weights.push(w);
    }
    let out = ctx.matmul(&p.w_o);
    Ok((out, AttnCache { q, k, v, weights, ctx }))
}

/// dX contribution from the attention sublayer; parameter grads accumulate
/// into `g`.
fn multi_head_backward(
    d_out: &Mat,
    x: &Mat,
    cache: &AttnCache,
    p: &LayerParams,
    heads: usize,
    g: &mut LayerParams,
) -> Mat {
    let d = x.cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let n = x.rows();

    g.w_o.add_assign(&cache.ctx.matmul_tn(d_out));
    let d_ctx = d_out.matmul_nt(&p.w_o);

    let mut dq = Mat::zeros(n, d);
    let mut dkm = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    for h in 0..heads {
        let lo = h * dk;
        let hi = lo + dk;
        let w = &cache.weights[h];
        // Weight-level gradient, then softmax backward row by row.
        let mut dw = Mat::zeros(n, n);
        for i in 0..n {
            let dci = &d_ctx.row(i)[lo..hi];
            for j in 0..n {
                if w.at(i, j) != 0.0 {
                    dw.set(i, j, dot(dci, &cache.v.row(j)[lo..hi]));
                    add_scaled(&mut dv.row_mut(j)[lo..hi], dci, w.at(i, j));
                }
            }
        }
        for i in 0..n {
            let wrow = w.row(i);
            let dwrow = dw.row(i);
            let inner: f64 = wrow.iter().zip(dwrow).map(|(a, b)| a * b).sum();
            // ds_j = w_j * (dw_j - sum_k dw_k w_k); zero-weight (padded) keys
            // stay zero.
            for j in 0..n {
                let ds = wrow[j] * (dwrow[j] - inner);
                if ds != 0.0 {
                    add_scaled(&mut dq.row_mut(i)[lo..hi], &cache.k.row(j)[lo..hi], ds * scale);
                    add_scaled(&mut dkm.row_mut(j)[lo..hi], &cache.q.row(i)[lo..hi], ds * scale);
                }
            }
        }
    }
    g.w_q.add_assign(&x.matmul_tn(&dq));
    g.w_k.add_assign(&x.matmul_tn(&dkm));
    g.w_v.add_assign(&x.matmul_tn(&dv));

    let mut dx = dq.matmul_nt(&p.w_q);
    dx.add_assign(&dkm.matmul_nt(&p.w_k));
    dx.add_assign(&dv.matmul_nt(&p.w_v));
    dx
}

// --- layer norm -------------------------------------------------------------

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Mat, gain: &Mat, bias: &Mat) -> (Mat, LnCache) {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Mat::zeros(n, d);
    let mut xhat = Mat::zeros(n, d);
    let mut inv_std = vec![0.0; n];
    let g = gain.row(0);
    let b = bias.row(0);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        let xh = xhat.row_mut(i);
        let o = out.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * istd;
            o[j] = g[j] * xh[j] + b[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Mat,
    cache: &LnCache,
    gain: &Mat,
    d_gain: &mut Mat,
    d_bias: &mut Mat,
) -> Mat {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = Mat::zeros(n, d);
    let g = gain.row(0);
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let dgr = d_gain.row_mut(0);
        for j in 0..d {
            dgr[j] += dyr[j] * xh[j];
        }
        let dbr = d_bias.row_mut(0);
        for j in 0..d {
            dbr[j] += dyr[j];
        }
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
        }
        let istd = cache.inv_std[i];
        let inv_d = 1.0 / d as f64;
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dxr[j] = istd * (dxh - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
        }
    }
    dx
}

// --- GELU (tanh form) -------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let z = GELU_C * (u + GELU_A * u * u * u);
    let t = z.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * u * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

// --- full layer ---------------------------------------------------------------

pub struct LayerCache {
    x_in: Mat,
    attn: AttnCache,
    drop1: Option<Vec<f64>>,
    ln1: LnCache,
    x1: Mat,
    ff_u: Mat,
    drop2: Option<Vec<f64>>,
    ln2: LnCache,
}

fn dropout_mask(len: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 - p;
    (0..len)
        .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

fn apply_mask(m: &mut Mat, mask: &[f64]) {
    for (v, &k) in m.data_mut().iter_mut().zip(mask) {
        *v *= k;
    }
}

fn add_bias(m: &mut Mat, bias: &Mat) {
    let b = bias.row(0);
    for i in 0..m.rows() {
        let r = m.row_mut(i);
        for j in 0..r.len() {
            r[j] += b[j];
        }
    }
}

/// Post-norm block: LN(x + drop(attn(x))), then LN(· + drop(ffn(·))).
pub fn layer_forward(
    x: &Mat,
    pad: &[bool],
    p: &LayerParams,
    heads: usize,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<(Mat, LayerCache)> {
    let (mut attn_out, attn) = multi_head_cached(x, p, heads, pad)?;
    let mut rng = match dropout {
        Some((dp, r)) if dp > 0.0 => Some((dp, r)),
        _ => None,
    };

    let drop1 = rng.as_mut().map(|(dp, rng)| {
        let m = dropout_mask(attn_out.rows() * attn_out.cols(), *dp, rng);
        apply_mask(&mut attn_out, &m);
        m
    });
    let mut s1 = x.clone();
    s1.add_assign(&attn_out);
    let (x1, ln1) = layer_norm(&s1, &p.ln1_g, &p.ln1_b);

    let mut ff_u = x1.matmul(&p.ff1_w);
    add_bias(&mut ff_u, &p.ff1_b);
    let mut ff_a = ff_u.clone();
    ff_a.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut ff_out = ff_a.matmul(&p.ff2_w);
    add_bias(&mut ff_out, &p.ff2_b);

    let drop2 = rng.as_mut().map(|(dp, rng)| {
        let m = dropout_mask(ff_out.rows() * ff_out.cols(), *dp, rng);
        apply_mask(&mut ff_out, &m);
        m
    });
    let mut s2 = x1.clone();
    s2.add_assign(&ff_out);
    let (x2, ln2) = layer_norm(&s2, &p.ln2_g, &p.ln2_b);
    Ok((
        x2,
        LayerCache { x_in: x.clone(), attn, drop1, ln1, x1, ff_u, drop2, ln2 },
    ))
}

/// Backward through one layer; accumulates parameter grads and returns dX.
pub fn layer_backward(
    d_out: &Mat,
    cache: &LayerCache,
    p: &LayerParams,
    heads: usize,
    g: &mut LayerParams,
) -> Mat {
    // LN2 backward -> gradient on s2 = x1 + drop(ff_out)
    let ds2 = layer_norm_backward(d_out, &cache.ln2, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);

    // Feed-forward backward.
    let mut dff_out = ds2.clone();
    if let Some(m) = &cache.drop2 {
        apply_mask(&mut dff_out, m);
    }
    let mut ff_a = cache.ff_u.clone();
    ff_a.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    g.ff2_w.add_assign(&ff_a.matmul_tn(&dff_out));
    for i in 0..dff_out.rows() {
        let r = dff_out.row(i);
        let b = g.ff2_b.row_mut(0);
        for j in 0..r.len() {
            b[j] += r[j];
        }
    }
    let mut du = dff_out.matmul_nt(&p.ff2_w);
    for (duv, &uv) in du.data_mut().iter_mut().zip(cache.ff_u.data()) {
        *duv *= gelu_grad(uv);
    }
    g.ff1_w.add_assign(&cache.x1.matmul_tn(&du));
    for i in 0..du.rows() {
        let r = du.row(i);
        let b = g.ff1_b.row_mut(0);
        for j in 0..r.len() {
            b[j] += r[j];
        }
    }
    let mut dx1 = du.matmul_nt(&p.ff1_w);
    dx1.add_assign(&ds2); // residual path

    // LN1 backward -> gradient on s1 = x + drop(attn_out)
    let ds1 = layer_norm_backward(&dx1, &cache.ln1, &p.ln1_g, &mut g.ln1_g, &mut g.ln1_b);

    let mut d_attn = ds1.clone();
    if let Some(m) = &cache.drop1 {
        apply_mask(&mut d_attn, m);
    }
    let mut dx = multi_head_backward(&d_attn, &cache.x_in, &cache.attn, p, heads, g);
    dx.add_assign(&ds1); // residual path
    dx
}

/// Inference-mode encoder: L blocks, dropout off, deterministic. `layers`
/// empty returns the input unchanged. Non-finite intermediates are rejected
/// with the layer index.
pub fn encode(x: &Mat, pad: &[bool], layers: &[LayerParams], heads: usize) -> Result<Mat> {
    let mut h = x.clone();
    for (i, p) in layers.iter().enumerate() {
        let (next, _) = layer_forward(&h, pad, p, heads, None)?;
        if !next.is_finite() {
            return Err(Error::numerical(format!("non-finite hidden state after layer {i}")));
        }
        h = next;
    }
    Ok(h)
}

/// Training-mode encoder forward: returns hidden states and per-layer caches.
pub fn encoder_forward(
    x: &Mat,
    pad: &[bool],
    layers: &[LayerParams],
    heads: usize,
    mut dropout: Option<(f64, &mut Rng)>,
) -> Result<(Mat, Vec<LayerCache>)> {
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for (i, p) in layers.iter().enumerate() {
        let drop = dropout.as_mut().map(|(dp, rng)| (*dp, &mut **rng));
        let (next, cache) = layer_forward(&h, pad, p, heads, drop)?;
        if !next.is_finite() {
            return Err(Error::numerical(format!("non-finite hidden state after layer {i}")));
        }
        caches.push(cache);
        h = next;
    }
    Ok((h, caches))
}

/// Backward through the whole stack; returns the gradient on the input
/// sequence.
pub fn encoder_backward(
    d_h: &Mat,
    caches: &[LayerCache],
    layers: &[LayerParams],
    heads: usize,
    grads: &mut [LayerParams],
) -> Mat {
    let mut d = d_h.clone();
    for i in (0..layers.len()).rev() {
        d = layer_backward(&d, &caches[i], &layers[i], heads, &mut grads[i]);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rmat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = Rng::seeded(seed);
        uniform_mat(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn identical_keys_give_uniform_weights_and_mean_output() {
        let q = rmat(3, 4, 1);
        let k = Mat::from_rows(vec![vec![0.5, -0.2, 0.1, 0.9]; 5]);
        let v = rmat(5, 4, 2);
        let pad = vec![false; 5];
        let (out, w) = attention_with_weights(&q, &k, &v, &pad).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert!((w.at(i, j) - 0.2).abs() < 1e-12);
            }
            for c in 0..4 {
                let mean: f64 = (0..5).map(|j| v.at(j, c)).sum::<f64>() / 5.0;
                assert!((out.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_unpadded_key_returns_that_value_row_exactly() {
        let q = rmat(2, 4, 3);
        let k = rmat(3, 4, 4);
        let v = rmat(3, 4, 5);
        let pad = vec![true, false, true];
        let out = attention(&q, &k, &v, &pad).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i), v.row(1));
        }
    }

    /// 2x2 case with Q = K = I2: weights reproduce a hand-evaluated softmax of
    /// the scaled scores to 1e-12.
    #[test]
    fn two_by_two_matches_hand_evaluated_softmax() {
        let q = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let k = q.clone();
        let v = Mat::from_rows(vec![vec![3.0, -1.0], vec![2.0, 5.0]]);
        let pad = vec![false, false];
        let (out, w) = attention_with_weights(&q, &k, &v, &pad).unwrap();
        // Row 0 scores: (1/sqrt(2), 0). Hand-evaluated softmax:
        let s = 1.0 / 2.0f64.sqrt();
        let z = s.exp() + 1.0;
        let w00 = s.exp() / z;
        let w01 = 1.0 / z;
        assert!((w.at(0, 0) - w00).abs() < 1e-12);
        assert!((w.at(0, 1) - w01).abs() < 1e-12);
        assert!((out.at(0, 0) - (w00 * 3.0 + w01 * 2.0)).abs() < 1e-12);
        assert!((out.at(0, 1) - (w00 * -1.0 + w01 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_non_finite_inputs() {
        let mut q = rmat(2, 2, 7);
        q.set(0, 0, f64::NAN);
        let k = rmat(2, 2, 8);
        let v = rmat(2, 2, 9);
        assert!(attention(&q, &k, &v, &[false, false]).is_err());
    }

    #[test]
    fn output_rows_stay_in_value_convex_hull() {
        let mut rng = Rng::seeded(42);
        for trial in 0..200 {
            let n = 2 + rng.below(6);
            let q = rmat(n, 6, 100 + trial);
            let k = rmat(n, 6, 200 + trial);
            let v = rmat(n, 6, 300 + trial);
            let mut pad = vec![false; n];
            if n > 2 {
                pad[rng.below(n)] = true;
            }
            let out = attention(&q, &k, &v, &pad).unwrap();
            for c in 0..6 {
                let (mut lo, mut hi) = (f64::MAX, f64::MIN);
                for j in 0..n {
                    if !pad[j] {
                        lo = lo.min(v.at(j, c));
                        hi = hi.max(v.at(j, c));
                    }
                }
                for i in 0..n {
                    let o = out.at(i, c);
                    assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn raw_attention_is_permutation_equivariant() {
        let n = 5;
        let q = rmat(n, 4, 11);
        let k = rmat(n, 4, 12);
        let v = rmat(n, 4, 13);
        let pad = vec![false, false, true, false, false];
        let base = attention(&q, &k, &v, &pad).unwrap();

        let perm = [3usize, 0, 4, 2, 1];
        let permute = |m: &Mat| Mat::from_rows(perm.iter().map(|&i| m.row(i).to_vec()).collect());
        let pad_p: Vec<bool> = perm.iter().map(|&i| pad[i]).collect();
        let permuted = attention(&permute(&q), &permute(&k), &permute(&v), &pad_p).unwrap();
        for (pi, &i) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((permuted.at(pi, c) - base.at(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_head_equals_plain_attention_on_projections() {
        let d = 6;
        let mut rng = Rng::seeded(21);
        let p = LayerParams::init(d, 2 * d, &mut rng);
        let x = rmat(4, d, 22);
        let pad = vec![false, false, false, true];
        let mh = multi_head(&x, &p, 1, &pad).unwrap();
        let plain = attention(&x.matmul(&p.w_q), &x.matmul(&p.w_k), &x.matmul(&p.w_v), &pad)
            .unwrap()
            .matmul(&p.w_o);
        for i in 0..4 {
            for j in 0..d {
                assert!((mh.at(i, j) - plain.at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_preserves_shape() {
        let d = 8;
        let mut rng = Rng::seeded(31);
        let p = LayerParams::init(d, 16, &mut rng);
        let x = rmat(5, d, 32);
        let out = multi_head(&x, &p, 4, &vec![false; 5]).unwrap();
        assert_eq!((out.rows(), out.cols()), (5, 8));
    }

    /// With head 2's value projection zeroed and w_o = I, head 2's half of the
    /// output is exactly zero and the rest matches a head-1-only computation.
    #[test]
    fn zeroed_head_contributes_nothing() {
        let d = 4;
        let heads = 2;
        let mut rng = Rng::seeded(41);
        let mut p = LayerParams::init(d, 8, &mut rng);
        for r in 0..d {
            for c in 2..4 {
                p.w_v.set(r, c, 0.0);
            }
        }
        p.w_o = Mat::from_rows(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let x = rmat(3, d, 42);
        let out = multi_head(&x, &p, heads, &vec![false; 3]).unwrap();
        for i in 0..3 {
            assert_eq!(out.at(i, 2), 0.0);
            assert_eq!(out.at(i, 3), 0.0);
        }
    }

    #[test]
    fn zero_layers_return_input_unchanged() {
        let x = rmat(4, 8, 51);
        let h = encode(&x, &vec![false; 4], &[], 2).unwrap();
        assert_eq!(h, x);
    }

    #[test]
    fn encode_is_deterministic() {
        let d = 8;
        let mut rng = Rng::seeded(61);
        let layers = vec![LayerParams::init(d, 16, &mut rng), LayerParams::init(d, 16, &mut rng)];
        let x = rmat(5, d, 62);
        let pad = vec![false, false, false, false, true];
        let a = encode(&x, &pad, &layers, 2).unwrap();
        let b = encode(&x, &pad, &layers, 2).unwrap();
        assert_eq!(a, b);
    }

    /// Changing a padded position's input vector must leave every unpadded
    /// output row bit-identical.
    #[test]
    fn pad_content_cannot_leak() {
        let d = 8;
        let mut rng = Rng::seeded(71);
        let layers = vec![LayerParams::init(d, 16, &mut rng), LayerParams::init(d, 16, &mut rng)];
        let mut x = rmat(5, d, 72);
        let pad = vec![false, false, false, false, true];
        for j in 0..d {
            x.set(4, j, 0.0);
        }
        let base = encode(&x, &pad, &layers, 2).unwrap();
        for j in 0..d {
            x.set(4, j, 1000.0 + j as f64);
        }
        let perturbed = encode(&x, &pad, &layers, 2).unwrap();
        for i in 0..4 {
            assert_eq!(base.row(i), perturbed.row(i), "row {i} changed");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_zero_weight_on_pads() {
        let mut rng = Rng::seeded(81);
        for trial in 0..1000 {
            let n = 2 + rng.below(6);
            let q = rmat(n, 4, 1000 + trial);
            let k = rmat(n, 4, 2000 + trial);
            let v = rmat(n, 4, 3000 + trial);
            let mut pad = vec![false; n];
            if n > 2 {
                pad[rng.below(n)] = true;
            }
            let (_, w) = attention_with_weights(&q, &k, &v, &pad).unwrap();
            for i in 0..n {
                let sum: f64 = w.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for j in 0..n {
                    if pad[j] {
                        assert_eq!(w.at(i, j), 0.0);
                    }
                }
            }
        }
    }
}
