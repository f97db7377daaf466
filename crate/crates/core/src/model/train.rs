//! Teacher-forced forward pass with a recorded tape, and its exact reverse.

use rand_chacha::ChaCha8Rng;

use super::ops::{
    add_into, apply_mask, attention, attention_backward, check_finite, dropout, embed, layer_norm,
    layer_norm_backward, linear, linear_backward, AttnCache, AttnLayout, LnCache, Segment,
};
use super::{AttentionParams, FeedForwardParams, ModelParams, Tensor};
use crate::d2d::TrainingExample;
use crate::error::{Error, Result};
use crate::linalg::{gemm, Scalar, View};
use crate::rng::derived_rng;
use crate::tokenizer::PAD;

/// Padded batch. Row `b` of `src` holds `src_lens[b]` ids followed by PAD;
/// `tgt_in`/`tgt_out` are the target shifted for teacher forcing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    pub langs: Vec<usize>,
}

impl Batch {
    /// `targets` are full `BOS ... EOS` sequences of length at least 2.
    pub fn from_sequences(sources: &[&[u32]], targets: &[&[u32]], langs: &[usize]) -> Result<Self> {
        let size = sources.len();
        if targets.len() != size || langs.len() != size {
            return Err(Error::Config("batch columns have different lengths".into()));
        }
        if let Some(t) = targets.iter().find(|t| t.len() < 2) {
            return Err(Error::Config(format!("target of length {} cannot be teacher-forced", t.len())));
        }
        let src_len = sources.iter().map(|s| s.len()).max().unwrap_or(0);
        let tgt_len = targets.iter().map(|t| t.len() - 1).max().unwrap_or(0);
        let mut batch = Batch {
            size,
            src_len,
            tgt_len,
            src: vec![PAD; size * src_len],
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            src_lens: sources.iter().map(|s| s.len()).collect(),
            tgt_lens: targets.iter().map(|t| t.len() - 1).collect(),
            langs: langs.to_vec(),
        };
        for b in 0..size {
            batch.src[b * src_len..b * src_len + sources[b].len()].copy_from_slice(sources[b]);
            let t = targets[b];
            let n = t.len() - 1;
            batch.tgt_in[b * tgt_len..b * tgt_len + n].copy_from_slice(&t[..n]);
            batch.tgt_out[b * tgt_len..b * tgt_len + n].copy_from_slice(&t[1..]);
        }
        Ok(batch)
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a TrainingExample>) -> Result<Self> {
        let examples: Vec<&TrainingExample> = examples.into_iter().collect();
        let src: Vec<&[u32]> = examples.iter().map(|e| e.src_ids.as_slice()).collect();
        let tgt: Vec<&[u32]> = examples.iter().map(|e| e.tgt_ids.as_slice()).collect();
        let langs: Vec<usize> = examples.iter().map(|e| e.lang_index()).collect();
        Self::from_sequences(&src, &tgt, &langs)
    }

    fn src_row(&self, b: usize) -> &[u32] {
        &self.src[b * self.src_len..b * self.src_len + self.src_lens[b]]
    }

    fn tgt_in_row(&self, b: usize) -> &[u32] {
        &self.tgt_in[b * self.tgt_len..b * self.tgt_len + self.tgt_lens[b]]
    }

    fn tgt_out_row(&self, b: usize) -> &[u32] {
        &self.tgt_out[b * self.tgt_len..b * self.tgt_len + self.tgt_lens[b]]
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }
}

fn segments(lens: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lens.iter()
        .map(|&len| {
            let s = Segment { start, len };
            start += len;
            s
        })
        .collect()
}

struct AttnTape<S> {
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    cache: AttnCache<S>,
    ctx: Vec<S>,
    out_mask: Option<Vec<S>>,
}

struct FfnTape<S> {
    pre: Vec<S>,
    act: Vec<S>,
    out_mask: Option<Vec<S>>,
}

struct EncTape<S> {
    ln_attn: LnCache<S>,
    attn: AttnTape<S>,
    ln_ffn: LnCache<S>,
    ffn: FfnTape<S>,
}

struct DecTape<S> {
    ln_self: LnCache<S>,
    self_attn: AttnTape<S>,
    ln_cross: LnCache<S>,
    cross_attn: AttnTape<S>,
    ln_ffn: LnCache<S>,
    ffn: FfnTape<S>,
}

struct Tape<S> {
    src_segs: Vec<Segment>,
    tgt_segs: Vec<Segment>,
    src_emb_mask: Option<Vec<S>>,
    tgt_emb_mask: Option<Vec<S>>,
    enc: Vec<EncTape<S>>,
    enc_ln: LnCache<S>,
    dec: Vec<DecTape<S>>,
    dec_ln: LnCache<S>,
    /// softmax of the logits, `[n_tgt, vocab]`
    probs: Vec<S>,
}

pub(crate) struct Outputs<S> {
    /// packed `[n_tgt, vocab]`
    pub logits: Vec<S>,
    pub token_loss: Vec<S>,
    pub label_logp: Vec<S>,
    pub loss: S,
}

struct Ctx<'a, S> {
    params: &'a ModelParams<S>,
    rng: Option<ChaCha8Rng>,
}

impl<S: Scalar> Ctx<'_, S> {
    fn drop(&mut self, x: &mut [S], p: f64) -> Option<Vec<S>> {
        dropout(x, p, self.rng.as_mut())
    }

    #[allow(clippy::too_many_arguments)]
    fn attn(
        &mut self,
        p: &AttentionParams<S>,
        x_q: &[S],
        x_kv: &[S],
        n_q: usize,
        n_kv: usize,
        q_segs: &[Segment],
        kv_segs: &[Segment],
        causal: bool,
    ) -> (Vec<S>, AttnTape<S>) {
        let cfg = &self.params.config;
        let q = linear(x_q, n_q, &p.wq, &p.bq);
        let k = linear(x_kv, n_kv, &p.wk, &p.bk);
        let v = linear(x_kv, n_kv, &p.wv, &p.bv);
        let layout = AttnLayout { heads: cfg.heads, d: cfg.d_model, q_segs, kv_segs, causal };
        let (ctx, cache) = attention(&q, &k, &v, &layout, cfg.dropout_attention, self.rng.as_mut(), n_q);
        let mut out = linear(&ctx, n_q, &p.wo, &p.bo);
        let out_mask = self.drop(&mut out, cfg.dropout_residual);
        (out, AttnTape { q, k, v, cache, ctx, out_mask })
    }

    fn ffn(&mut self, p: &FeedForwardParams<S>, x: &[S], n: usize) -> (Vec<S>, FfnTape<S>) {
        let pre = linear(x, n, &p.w1, &p.b1);
        let act: Vec<S> = pre.iter().map(|&v| v.max(S::zero())).collect();
        let mut out = linear(&act, n, &p.w2, &p.b2);
        let out_mask = self.drop(&mut out, self.params.config.dropout_residual);
        (out, FfnTape { pre, act, out_mask })
    }
}

fn run_forward<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<(Outputs<S>, Tape<S>)> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let n_src: usize = batch.src_lens.iter().sum();
    let n_tgt: usize = batch.target_tokens();
    let src_segs = segments(&batch.src_lens);
    let tgt_segs = segments(&batch.tgt_lens);
    let mut ctx = Ctx {
        params,
        rng: dropout_seed.map(|s| derived_rng(s, &[0xD80]))
    };

    let mut x = Vec::with_capacity(n_src * d);
    let mut y = Vec::with_capacity(n_tgt * d);
    for b in 0..batch.size {
        if batch.langs[b] >= cfg.languages.len() {
            return Err(Error::UnknownLanguage(format!("language index {}", batch.langs[b])));
        }
        x.extend(embed(params, batch.src_row(b), Some(batch.langs[b]), 0)?);
        y.extend(embed(params, batch.tgt_in_row(b), None, 0)?);
    }
    let src_emb_mask = ctx.drop(&mut x, cfg.dropout_residual);
    let tgt_emb_mask = ctx.drop(&mut y, cfg.dropout_residual);

    let mut enc = Vec::with_capacity(cfg.layers);
    for (i, layer) in params.encoder.iter().enumerate() {
        let ln_attn = layer_norm(&x, n_src, &layer.ln_attn);
        let (a, attn) = ctx.attn(&layer.self_attn, &ln_attn.y, &ln_attn.y, n_src, n_src, &src_segs, &src_segs, false);
        add_into(&mut x, &a);
        let ln_ffn = layer_norm(&x, n_src, &layer.ln_ffn);
        let (f, ffn) = ctx.ffn(&layer.ffn, &ln_ffn.y, n_src);
        add_into(&mut x, &f);
        check_finite(&x, &format!("encoder.{i}"))?;
        enc.push(EncTape { ln_attn, attn, ln_ffn, ffn });
    }
    let enc_ln = layer_norm(&x, n_src, &params.enc_ln);
    let memory = &enc_ln.y;

    let mut dec = Vec::with_capacity(cfg.layers);
    for (i, layer) in params.decoder.iter().enumerate() {
        let ln_self = layer_norm(&y, n_tgt, &layer.ln_self);
        let (a, self_attn) = ctx.attn(&layer.self_attn, &ln_self.y, &ln_self.y, n_tgt, n_tgt, &tgt_segs, &tgt_segs, true);
        add_into(&mut y, &a);
        let ln_cross = layer_norm(&y, n_tgt, &layer.ln_cross);
        let (c, cross_attn) = ctx.attn(&layer.cross_attn, &ln_cross.y, memory, n_tgt, n_src, &tgt_segs, &src_segs, false);
        add_into(&mut y, &c);
        let ln_ffn = layer_norm(&y, n_tgt, &layer.ln_ffn);
        let (f, ffn) = ctx.ffn(&layer.ffn, &ln_ffn.y, n_tgt);
        add_into(&mut y, &f);
        check_finite(&y, &format!("decoder.{i}"))?;
        dec.push(DecTape { ln_self, self_attn, ln_cross, cross_attn, ln_ffn, ffn });
    }
    let dec_ln = layer_norm(&y, n_tgt, &params.dec_ln);

    let v = cfg.vocab_size;
    let mut logits = vec![S::zero(); n_tgt * v];
    gemm(
        S::one(),
        &dec_ln.y, View::full(n_tgt, d), false,
        &params.tok_emb.data, View::full(v, d), true,
        S::zero(), &mut logits, View::full(n_tgt, v),
    );
    check_finite(&logits, "output projection")?;

    let eps = S::from_f64(cfg.label_smoothing);
    let smooth = eps / S::from_f64(v as f64);
    let mut probs = vec![S::zero(); n_tgt * v];
    let mut token_loss = Vec::with_capacity(n_tgt);
    let mut label_logp = Vec::with_capacity(n_tgt);
    let labels: Vec<u32> = (0..batch.size).flat_map(|b| batch.tgt_out_row(b).iter().copied()).collect();
    for (t, &label) in labels.iter().enumerate() {
        let row = &logits[t * v..(t + 1) * v];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<S>().ln();
        let mut sum_logp = S::zero();
        for j in 0..v {
            let lp = row[j] - lse;
            sum_logp = sum_logp + lp;
            probs[t * v + j] = lp.exp();
        }
        let lp_label = row[label as usize] - lse;
        label_logp.push(lp_label);
        token_loss.push(-(S::one() - eps) * lp_label - smooth * sum_logp);
    }
    let loss = if n_tgt == 0 {
        S::zero()
    } else {
        token_loss.iter().copied().sum::<S>() / S::from_f64(n_tgt as f64)
    };
    if !loss.is_finite() {
        return Err(Error::Numeric { location: "loss".into() });
    }
    Ok((
        Outputs { logits, token_loss, label_logp, loss },
        Tape { src_segs, tgt_segs, src_emb_mask, tgt_emb_mask, enc, enc_ln, dec, dec_ln, probs },
    ))
}

#[allow(clippy::too_many_arguments)]
fn attn_backward<S: Scalar>(
    cfg: &super::ModelConfig,
    p: &AttentionParams<S>,
    g: &mut AttentionParams<S>,
    tape: &AttnTape<S>,
    d_out: &[S],
    x_q: &[S],
    x_kv: &[S],
    segs: (&[Segment], &[Segment], bool),
    n_q: usize,
    n_kv: usize,
) -> (Vec<S>, Vec<S>) {
    let mut d_out = d_out.to_vec();
    apply_mask(&mut d_out, &tape.out_mask);
    let d_ctx = linear_backward(&tape.ctx, n_q, &p.wo, &d_out, &mut g.wo, &mut g.bo);
    let layout = AttnLayout { heads: cfg.heads, d: cfg.d_model, q_segs: segs.0, kv_segs: segs.1, causal: segs.2 };
    let (dq, dk, dv) = attention_backward(&d_ctx, &tape.q, &tape.k, &tape.v, &tape.cache, &layout, n_q, n_kv);
    let dxq = linear_backward(x_q, n_q, &p.wq, &dq, &mut g.wq, &mut g.bq);
    let mut dxkv = linear_backward(x_kv, n_kv, &p.wk, &dk, &mut g.wk, &mut g.bk);
    add_into(&mut dxkv, &linear_backward(x_kv, n_kv, &p.wv, &dv, &mut g.wv, &mut g.bv));
    (dxq, dxkv)
}

fn ffn_backward<S: Scalar>(
    p: &FeedForwardParams<S>,
    g: &mut FeedForwardParams<S>,
    tape: &FfnTape<S>,
    d_out: &[S],
    x: &[S],
    n: usize,
) -> Vec<S> {
    let mut d_out = d_out.to_vec();
    apply_mask(&mut d_out, &tape.out_mask);
    let mut d_act = linear_backward(&tape.act, n, &p.w2, &d_out, &mut g.w2, &mut g.b2);
    for (da, &pre) in d_act.iter_mut().zip(&tape.pre) {
        if pre <= S::zero() {
            *da = S::zero();
        }
    }
    linear_backward(x, n, &p.w1, &d_act, &mut g.w1, &mut g.b1)
}

fn run_backward<S: Scalar>(params: &ModelParams<S>, batch: &Batch, tape: &Tape<S>) -> ModelParams<S> {
    let cfg = &params.config;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let n_src: usize = batch.src_lens.iter().sum();
    let n_tgt: usize = batch.target_tokens();
    let mut g = params.zeros_like();
    if n_tgt == 0 {
        return g;
    }

    // d loss / d logits = (softmax - smoothed one-hot) / n_tgt
    let eps = cfg.label_smoothing;
    let inv_n = S::from_f64(1.0 / n_tgt as f64);
    let smooth = S::from_f64(eps / v as f64);
    let mut dlogits: Vec<S> = tape.probs.iter().map(|&p| (p - smooth) * inv_n).collect();
    let labels = (0..batch.size).flat_map(|b| batch.tgt_out_row(b).iter().copied());
    for (t, label) in labels.enumerate() {
        let idx = t * v + label as usize;
        dlogits[idx] = dlogits[idx] - S::from_f64(1.0 - eps) * inv_n;
    }
    let mut dz = vec![S::zero(); n_tgt * d];
    gemm(S::one(), &dlogits, View::full(n_tgt, v), false, &params.tok_emb.data, View::full(v, d), false, S::zero(), &mut dz, View::full(n_tgt, d));
    gemm(S::one(), &dlogits, View::full(n_tgt, v), true, &tape.dec_ln.y, View::full(n_tgt, d), false, S::one(), &mut g.tok_emb.data, View::full(v, d));

    let mut dy = layer_norm_backward(&dz, &tape.dec_ln, &params.dec_ln, &mut g.dec_ln);
    let memory = &tape.enc_ln.y;
    let mut dmem = vec![S::zero(); n_src * d];
    for ((layer, gl), lt) in params.decoder.iter().zip(g.decoder.iter_mut()).zip(&tape.dec).rev() {
        let dx = ffn_backward(&layer.ffn, &mut gl.ffn, &lt.ffn, &dy, &lt.ln_ffn.y, n_tgt);
        add_into(&mut dy, &layer_norm_backward(&dx, &lt.ln_ffn, &layer.ln_ffn, &mut gl.ln_ffn));

        let (dq, dkv) = attn_backward(
            cfg, &layer.cross_attn, &mut gl.cross_attn, &lt.cross_attn, &dy,
            &lt.ln_cross.y, memory, (&tape.tgt_segs, &tape.src_segs, false), n_tgt, n_src,
        );
        add_into(&mut dmem, &dkv);
        add_into(&mut dy, &layer_norm_backward(&dq, &lt.ln_cross, &layer.ln_cross, &mut gl.ln_cross));

        let (dq, dkv) = attn_backward(
            cfg, &layer.self_attn, &mut gl.self_attn, &lt.self_attn, &dy,
            &lt.ln_self.y, &lt.ln_self.y, (&tape.tgt_segs, &tape.tgt_segs, true), n_tgt, n_tgt,
        );
        let mut dln = dq;
        add_into(&mut dln, &dkv);
        add_into(&mut dy, &layer_norm_backward(&dln, &lt.ln_self, &layer.ln_self, &mut gl.ln_self));
    }

    let mut dx = layer_norm_backward(&dmem, &tape.enc_ln, &params.enc_ln, &mut g.enc_ln);
    for ((layer, gl), lt) in params.encoder.iter().zip(g.encoder.iter_mut()).zip(&tape.enc).rev() {
        let df = ffn_backward(&layer.ffn, &mut gl.ffn, &lt.ffn, &dx, &lt.ln_ffn.y, n_src);
        add_into(&mut dx, &layer_norm_backward(&df, &lt.ln_ffn, &layer.ln_ffn, &mut gl.ln_ffn));
        let (dq, dkv) = attn_backward(
            cfg, &layer.self_attn, &mut gl.self_attn, &lt.attn, &dx,
            &lt.ln_attn.y, &lt.ln_attn.y, (&tape.src_segs, &tape.src_segs, false), n_src, n_src,
        );
        let mut dln = dq;
        add_into(&mut dln, &dkv);
        add_into(&mut dx, &layer_norm_backward(&dln, &lt.ln_attn, &layer.ln_attn, &mut gl.ln_attn));
    }

    apply_mask(&mut dx, &tape.src_emb_mask);
    apply_mask(&mut dy, &tape.tgt_emb_mask);
    let scale = S::from_f64((d as f64).sqrt());
    for b in 0..batch.size {
        let seg = tape.src_segs[b];
        let li = batch.langs[b];
        for (t, &id) in batch.src_row(b).iter().enumerate() {
            let row = &dx[(seg.start + t) * d..(seg.start + t + 1) * d];
            for (j, &r) in row.iter().enumerate() {
                let e = id as usize * d + j;
                g.tok_emb.data[e] = g.tok_emb.data[e] + r * scale;
                g.lang_emb.data[li * d + j] = g.lang_emb.data[li * d + j] + r;
            }
        }
        let seg = tape.tgt_segs[b];
        for (t, &id) in batch.tgt_in_row(b).iter().enumerate() {
            let row = &dy[(seg.start + t) * d..(seg.start + t + 1) * d];
            for (j, &r) in row.iter().enumerate() {
                let e = id as usize * d + j;
                g.tok_emb.data[e] = g.tok_emb.data[e] + r * scale;
            }
        }
    }
    g
}

/// Logits `[batch, tgt_len, vocab]` (zero at padded positions) and the
/// label-smoothed cross-entropy averaged over non-pad target tokens.
/// `dropout_seed` enables train mode.
pub fn forward<S: Scalar>(params: &ModelParams<S>, batch: &Batch, dropout_seed: Option<u64>) -> Result<(Tensor<S>, S)> {
    let (out, _) = run_forward(params, batch, dropout_seed)?;
    let v = params.config.vocab_size;
    let mut logits = Tensor::zeros(&[batch.size, batch.tgt_len, v]);
    let mut t = 0;
    for b in 0..batch.size {
        for i in 0..batch.tgt_lens[b] {
            let dst = (b * batch.tgt_len + i) * v;
            logits.data[dst..dst + v].copy_from_slice(&out.logits[t * v..(t + 1) * v]);
            t += 1;
        }
    }
    Ok((logits, out.loss))
}

/// Loss and exact gradients. With `dropout_seed = None` dropout is disabled;
/// otherwise masks are drawn from the seed and replayed in the reverse pass.
pub fn loss_and_grads<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<(S, ModelParams<S>)> {
    let (out, tape) = run_forward(params, batch, dropout_seed)?;
    let grads = run_backward(params, batch, &tape);
    Ok((out.loss, grads))
}

/// Gradients only; see [`loss_and_grads`].
pub fn backward<S: Scalar>(params: &ModelParams<S>, batch: &Batch, dropout_seed: Option<u64>) -> Result<ModelParams<S>> {
    loss_and_grads(params, batch, dropout_seed).map(|(_, g)| g)
}

/// `log p(tgt_out[t] | ...)` per example, eval mode.
pub fn token_log_probs<S: Scalar>(params: &ModelParams<S>, batch: &Batch) -> Result<Vec<Vec<S>>> {
    let (out, _) = run_forward(params, batch, None)?;
    Ok(split_rows(&out.label_logp, &batch.tgt_lens))
}

/// Mean label-smoothed loss of each example, eval mode.
pub fn example_losses<S: Scalar>(params: &ModelParams<S>, batch: &Batch) -> Result<Vec<S>> {
    let (out, _) = run_forward(params, batch, None)?;
    Ok(split_rows(&out.token_loss, &batch.tgt_lens)
        .into_iter()
        .map(|r| {
            let n = S::from_f64(r.len().max(1) as f64);
            r.into_iter().sum::<S>() / n
        })
        .collect())
}

fn split_rows<S: Copy>(flat: &[S], lens: &[usize]) -> Vec<Vec<S>> {
    let mut start = 0;
    lens.iter()
        .map(|&l| {
            let r = flat[start..start + l].to_vec();
            start += l;
            r
        })
        .collect()
}

/// Attention probabilities of the first encoder layer for example 0, head 0
/// (test hook for the normalization property).
#[doc(hidden)]
pub fn first_encoder_attention<S: Scalar>(params: &ModelParams<S>, batch: &Batch) -> Result<Vec<S>> {
    let (_, tape) = run_forward(params, batch, None)?;
    let l = batch.src_lens[0];
    Ok(tape.enc[0].attn.cache.probs(0, 0, params.config.heads, l, l).to_vec())
}

/// Decoder self-attention probabilities of the first layer for example 0, head 0.
#[doc(hidden)]
pub fn first_decoder_attention<S: Scalar>(params: &ModelParams<S>, batch: &Batch) -> Result<Vec<S>> {
    let (_, tape) = run_forward(params, batch, None)?;
    let l = batch.tgt_lens[0];
    Ok(tape.dec[0].self_attn.cache.probs(0, 0, params.config.heads, l, l).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, IncrementalDecoder, ModelConfig};

    fn cfg(dropout: f64) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 50,
            languages: vec!["de".into(), "fr".into()],
            dropout_residual: dropout,
            dropout_attention: dropout,
            label_smoothing: 0.1,
            max_positions: 64,
        }
    }

    fn batch(pairs: &[(&[u32], &[u32], usize)]) -> Batch {
        let s: Vec<&[u32]> = pairs.iter().map(|p| p.0).collect();
        let t: Vec<&[u32]> = pairs.iter().map(|p| p.1).collect();
        let l: Vec<usize> = pairs.iter().map(|p| p.2).collect();
        Batch::from_sequences(&s, &t, &l).unwrap()
    }

    fn two() -> Batch {
        batch(&[
            (&[7, 8, 9, 10, 11], &[2, 12, 13, 14, 15, 16, 3], 0),
            (&[20, 21, 22], &[2, 30, 31, 3], 1),
        ])
    }

    #[test]
    fn logits_shape_and_padding() {
        let p = init_model(&cfg(0.0), 1).unwrap();
        let b = two();
        let (logits, loss) = forward(&p, &b, None).unwrap();
        assert_eq!(logits.shape, vec![2, 6, 50]);
        assert!(loss.is_finite() && loss > 0.0);
        // rows past the second target are padding
        assert!(logits.data[(6 + 3) * 50..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        for eps in [0.0, 0.1, 0.5] {
            let mut c = cfg(0.0);
            c.label_smoothing = eps;
            let mut p = init_model(&c, 2).unwrap().cast::<f64>();
            p.tok_emb.data.iter_mut().for_each(|x| *x = 0.0);
            let (_, loss) = forward(&p, &two(), None).unwrap();
            assert!((loss - 50f64.ln()).abs() < 1e-6, "{loss}");
        }
    }

    #[test]
    fn attention_rows_normalize() {
        let p = init_model(&cfg(0.0), 3).unwrap();
        let b = two();
        let enc = first_encoder_attention(&p, &b).unwrap();
        for row in enc.chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let dec = first_decoder_attention(&p, &b).unwrap();
        for (i, row) in dec.chunks(6).enumerate() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0), "causal mask");
        }
    }

    #[test]
    fn dropout_only_in_train_mode_and_replayable() {
        let p = init_model(&cfg(0.3), 4).unwrap();
        let b = two();
        let (_, eval1) = forward(&p, &b, None).unwrap();
        let (_, eval2) = forward(&p, &b, None).unwrap();
        assert_eq!(eval1, eval2);
        let (_, t1) = forward(&p, &b, Some(9)).unwrap();
        let (_, t2) = forward(&p, &b, Some(9)).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, eval1);
        let g1 = backward(&p, &b, Some(9)).unwrap();
        let g2 = backward(&p, &b, Some(9)).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn zero_model_has_finite_gradients() {
        let p = ModelParams::<f32>::zeros(&cfg(0.0)).unwrap();
        let g = backward(&p, &two(), None).unwrap();
        assert!(g.all_finite());
    }

    #[test]
    fn padding_contributes_nothing() {
        let p = init_model(&cfg(0.0), 5).unwrap().cast::<f64>();
        let a: (&[u32], &[u32], usize) = (&[7, 8, 9, 10, 11], &[2, 12, 13, 14, 15, 16, 3], 0);
        let c: (&[u32], &[u32], usize) = (&[20, 21, 22], &[2, 30, 31, 3], 1);
        let (la, ga) = loss_and_grads(&p, &batch(&[a]), None).unwrap();
        let (lc, gc) = loss_and_grads(&p, &batch(&[c]), None).unwrap();
        let (lac, gac) = loss_and_grads(&p, &batch(&[a, c]), None).unwrap();
        let (na, nc) = (6.0, 3.0);
        assert!((lac - (na * la + nc * lc) / (na + nc)).abs() < 1e-12);
        for ((_, x), ((_, y), (_, z))) in gac.tensors().into_iter().zip(ga.tensors().into_iter().zip(gc.tensors())) {
            for i in 0..x.data.len() {
                let want = (na * y.data[i] + nc * z.data[i]) / (na + nc);
                assert!((x.data[i] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn batch_order_does_not_change_example_losses() {
        let p = init_model(&cfg(0.0), 6).unwrap().cast::<f64>();
        let a: (&[u32], &[u32], usize) = (&[7, 8, 9, 10, 11], &[2, 12, 13, 14, 15, 16, 3], 0);
        let c: (&[u32], &[u32], usize) = (&[20, 21, 22], &[2, 30, 31, 3], 1);
        let l1 = example_losses(&p, &batch(&[a, c])).unwrap();
        let l2 = example_losses(&p, &batch(&[c, a])).unwrap();
        assert!((l1[0] - l2[1]).abs() < 1e-12 && (l1[1] - l2[0]).abs() < 1e-12);
    }

    #[test]
    fn incremental_decoder_matches_teacher_forcing() {
        let p = init_model(&cfg(0.0), 7).unwrap().cast::<f64>();
        let src = [7u32, 8, 9, 4, 10];
        let tgt = [2u32, 12, 13, 4, 15, 3];
        let b = batch(&[(&src, &tgt, 1)]);
        let lp = token_log_probs(&p, &b).unwrap();
        let dec = IncrementalDecoder::new(&p, &src, 1).unwrap();
        let mut state = dec.initial_state();
        for t in 0..tgt.len() - 1 {
            let step = dec.step(&mut state, tgt[t]).unwrap();
            assert!((step[tgt[t + 1] as usize] - lp[0][t]).abs() < 1e-10);
        }
        assert_eq!(state.len(), tgt.len() - 1);
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let p = init_model(&cfg(0.0), 8).unwrap();
        let b = batch(&[(&[99], &[2, 3], 0)]);
        assert!(matches!(forward(&p, &b, None), Err(Error::TokenOutOfRange { id: 99, .. })));
    }
}
