//! Forward and backward kernels over packed token matrices (`rows × width`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{positional_table, LayerNormParams, ModelParams, Tensor, LN_EPS};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Scalar, View};

/// Embedding rows for one sequence starting at position `pos0`.
pub(crate) fn embed<S: Scalar>(
    params: &ModelParams<S>,
    ids: &[u32],
    lang: Option<usize>,
    pos0: usize,
) -> Result<Vec<S>> {
    let cfg = &params.config;
    let d = cfg.d_model;
    if pos0 + ids.len() > cfg.max_positions {
        return Err(Error::Config(format!(
            "sequence of length {} exceeds max_positions {}",
            pos0 + ids.len(),
            cfg.max_positions
        )));
    }
    let pe = positional_table::<S>(pos0 + ids.len(), d);
    let scale = S::from_f64((d as f64).sqrt());
    let mut out = vec![S::zero(); ids.len() * d];
    for (t, &id) in ids.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id, size: cfg.vocab_size });
        }
        let row = &mut out[t * d..(t + 1) * d];
        let emb = &params.tok_emb.data[id as usize * d..(id as usize + 1) * d];
        let pos = &pe[(pos0 + t) * d..(pos0 + t + 1) * d];
        for j in 0..d {
            row[j] = emb[j] * scale + pos[j];
        }
        if let Some(li) = lang {
            let le = &params.lang_emb.data[li * d..(li + 1) * d];
            for j in 0..d {
                row[j] = row[j] + le[j];
            }
        }
    }
    Ok(out)
}

pub(crate) fn linear<S: Scalar>(x: &[S], rows: usize, w: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(&b.data);
    }
    gemm(S::one(), x, View::full(rows, din), false, &w.data, View::full(din, dout), false, S::one(), &mut y, View::full(rows, dout));
    y
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub(crate) fn linear_backward<S: Scalar>(
    x: &[S],
    rows: usize,
    w: &Tensor<S>,
    dy: &[S],
    gw: &mut Tensor<S>,
    gb: &mut Tensor<S>,
) -> Vec<S> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    gemm(S::one(), x, View::full(rows, din), true, dy, View::full(rows, dout), false, S::one(), &mut gw.data, View::full(din, dout));
    for r in 0..rows {
        for (g, &d) in gb.data.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *g = *g + d;
        }
    }
    let mut dx = vec![S::zero(); rows * din];
    gemm(S::one(), dy, View::full(rows, dout), false, &w.data, View::full(din, dout), true, S::zero(), &mut dx, View::full(rows, din));
    dx
}

pub(crate) struct LnCache<S> {
    pub y: Vec<S>,
    xhat: Vec<S>,
    rstd: Vec<S>,
}

pub(crate) fn layer_norm<S: Scalar>(x: &[S], rows: usize, p: &LayerNormParams<S>) -> LnCache<S> {
    let d = p.gain.len();
    let eps = S::from_f64(LN_EPS);
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut y = vec![S::zero(); rows * d];
    let mut xhat = vec![S::zero(); rows * d];
    let mut rstd = vec![S::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * p.gain.data[j] + p.bias.data[j];
        }
    }
    LnCache { y, xhat, rstd }
}

pub(crate) fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    cache: &LnCache<S>,
    p: &LayerNormParams<S>,
    g: &mut LayerNormParams<S>,
) -> Vec<S> {
    let d = p.gain.len();
    let rows = cache.rstd.len();
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut dx = vec![S::zero(); rows * d];
    let mut dxhat = vec![S::zero(); d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let (mut sum, mut dot) = (S::zero(), S::zero());
        for j in 0..d {
            g.gain.data[j] = g.gain.data[j] + dyr[j] * xh[j];
            g.bias.data[j] = g.bias.data[j] + dyr[j];
            dxhat[j] = dyr[j] * p.gain.data[j];
            sum = sum + dxhat[j];
            dot = dot + dxhat[j] * xh[j];
        }
        let (mean_d, mean_dot) = (sum * inv_d, dot * inv_d);
        for j in 0..d {
            dx[r * d + j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dot);
        }
    }
    dx
}

/// Inverted dropout; returns the scale mask (`0` or `1/(1-p)`) when active.
pub(crate) fn dropout<S: Scalar>(x: &mut [S], p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<S>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = S::from_f64(1.0 / (1.0 - p));
    let mask: Vec<S> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Some(mask)
}

pub(crate) fn apply_mask<S: Scalar>(x: &mut [S], mask: &Option<Vec<S>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

pub(crate) fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Row segments of the packed matrices belonging to one example.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Segment {
    pub start: usize,
    pub len: usize,
}

pub(crate) struct AttnCache<S> {
    probs: Vec<S>,
    mask: Option<Vec<S>>,
    /// start of each (example, head) block in `probs`
    offsets: Vec<usize>,
}

pub(crate) struct AttnLayout<'a> {
    pub heads: usize,
    pub d: usize,
    pub q_segs: &'a [Segment],
    pub kv_segs: &'a [Segment],
    pub causal: bool,
}

pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|x| *x = S::zero());
        return;
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Multi-head scaled dot-product attention, one example segment at a time.
pub(crate) fn attention<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    layout: &AttnLayout<'_>,
    p_drop: f64,
    mut rng: Option<&mut ChaCha8Rng>,
    n_q: usize,
) -> (Vec<S>, AttnCache<S>) {
    let (h, d) = (layout.heads, layout.d);
    let dh = d / h;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut offsets = Vec::with_capacity(layout.q_segs.len() * h);
    let mut total = 0;
    for (qs, ks) in layout.q_segs.iter().zip(layout.kv_segs) {
        for _ in 0..h {
            offsets.push(total);
            total += qs.len * ks.len;
        }
    }
    let mut probs = vec![S::zero(); total];
    let mut out = vec![S::zero(); n_q * d];
    let dropping = rng.is_some() && p_drop > 0.0;
    let mut mask = if dropping { Some(vec![S::zero(); total]) } else { None };
    let keep = S::from_f64(1.0 / (1.0 - p_drop));
    let mut scratch = Vec::new();
    for (e, (qs, ks)) in layout.q_segs.iter().zip(layout.kv_segs).enumerate() {
        let (lq, lk) = (qs.len, ks.len);
        if lq == 0 || lk == 0 {
            continue;
        }
        for head in 0..h {
            let off = offsets[e * h + head];
            let block = &mut probs[off..off + lq * lk];
            gemm(
                scale,
                q, View::block(qs.start, lq, head * dh, dh, d), false,
                k, View::block(ks.start, lk, head * dh, dh, d), true,
                S::zero(), block, View::full(lq, lk),
            );
            for i in 0..lq {
                let row = &mut block[i * lk..(i + 1) * lk];
                if layout.causal {
                    for x in row.iter_mut().skip(i + 1) {
                        *x = S::neg_infinity();
                    }
                }
                softmax_row(row);
            }
            let used: &[S] = if let Some(m) = mask.as_mut() {
                let r = rng.as_deref_mut().expect("dropping implies rng");
                scratch.clear();
                for (idx, &pv) in block.iter().enumerate() {
                    let kv = if r.gen::<f64>() < p_drop { S::zero() } else { keep };
                    m[off + idx] = kv;
                    scratch.push(pv * kv);
                }
                &scratch
            } else {
                block
            };
            gemm(
                S::one(),
                used, View::full(lq, lk), false,
                v, View::block(ks.start, lk, head * dh, dh, d), false,
                S::zero(), &mut out, View::block(qs.start, lq, head * dh, dh, d),
            );
        }
    }
    (out, AttnCache { probs, mask, offsets })
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    dout: &[S],
    q: &[S],
    k: &[S],
    v: &[S],
    cache: &AttnCache<S>,
    layout: &AttnLayout<'_>,
    n_q: usize,
    n_kv: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (h, d) = (layout.heads, layout.d);
    let dh = d / h;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![S::zero(); n_q * d];
    let mut dk = vec![S::zero(); n_kv * d];
    let mut dv = vec![S::zero(); n_kv * d];
    let mut dp = Vec::new();
    let mut used = Vec::new();
    for (e, (qs, ks)) in layout.q_segs.iter().zip(layout.kv_segs).enumerate() {
        let (lq, lk) = (qs.len, ks.len);
        if lq == 0 || lk == 0 {
            continue;
        }
        for head in 0..h {
            let off = cache.offsets[e * h + head];
            let probs = &cache.probs[off..off + lq * lk];
            used.clear();
            match &cache.mask {
                Some(m) => used.extend(probs.iter().zip(&m[off..off + lq * lk]).map(|(&p, &k)| p * k)),
                None => used.extend_from_slice(probs),
            }
            // dv_h = P'^T dO_h
            gemm(
                S::one(),
                &used, View::full(lq, lk), true,
                dout, View::block(qs.start, lq, head * dh, dh, d), false,
                S::zero(), &mut dv, View::block(ks.start, lk, head * dh, dh, d),
            );
            // dP' = dO_h V_h^T
            dp.clear();
            dp.resize(lq * lk, S::zero());
            gemm(
                S::one(),
                dout, View::block(qs.start, lq, head * dh, dh, d), false,
                v, View::block(ks.start, lk, head * dh, dh, d), true,
                S::zero(), &mut dp, View::full(lq, lk),
            );
            if let Some(m) = &cache.mask {
                for (x, &kv) in dp.iter_mut().zip(&m[off..off + lq * lk]) {
                    *x = *x * kv;
                }
            }
            // softmax backward, in place: dS = P * (dP - <dP, P>)
            for i in 0..lq {
                let pr = &probs[i * lk..(i + 1) * lk];
                let dr = &mut dp[i * lk..(i + 1) * lk];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<S>();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            gemm(
                scale,
                &dp, View::full(lq, lk), false,
                k, View::block(ks.start, lk, head * dh, dh, d), false,
                S::zero(), &mut dq, View::block(qs.start, lq, head * dh, dh, d),
            );
            gemm(
                scale,
                &dp, View::full(lq, lk), true,
                q, View::block(qs.start, lq, head * dh, dh, d), false,
                S::zero(), &mut dk, View::block(ks.start, lk, head * dh, dh, d),
            );
        }
    }
    (dq, dk, dv)
}

impl<S: Scalar> AttnCache<S> {
    /// Attention probabilities of example `e`, head `head` (`lq × lk`, row-major).
    pub(crate) fn probs(&self, e: usize, head: usize, heads: usize, lq: usize, lk: usize) -> &[S] {
        let off = self.offsets[e * heads + head];
        &self.probs[off..off + lq * lk]
    }
}

pub(crate) fn check_finite<S: Scalar>(x: &[S], location: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { location: location.to_string() })
    }
}
