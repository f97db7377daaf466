//! Encoder-once, step-at-a-time decoding with cached keys and values.

use super::ops::{add_into, attention, check_finite, embed, layer_norm, linear, AttnLayout, Segment};
use super::{AttentionParams, FeedForwardParams, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Scalar, View};

/// Per-hypothesis self-attention cache.
#[derive(Clone, Debug)]
pub struct DecoderState<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

impl<S> DecoderState<S> {
    /// Number of target tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct IncrementalDecoder<'a, S> {
    params: &'a ModelParams<S>,
    n_src: usize,
    cross_k: Vec<Vec<S>>,
    cross_v: Vec<Vec<S>>,
}

fn ffn<S: Scalar>(p: &FeedForwardParams<S>, x: &[S], n: usize) -> Vec<S> {
    let mut h = linear(x, n, &p.w1, &p.b1);
    for v in h.iter_mut() {
        *v = v.max(S::zero());
    }
    linear(&h, n, &p.w2, &p.b2)
}

fn self_attention<S: Scalar>(p: &AttentionParams<S>, x: &[S], n: usize, heads: usize, d: usize) -> Vec<S> {
    let q = linear(x, n, &p.wq, &p.bq);
    let k = linear(x, n, &p.wk, &p.bk);
    let v = linear(x, n, &p.wv, &p.bv);
    let segs = [Segment { start: 0, len: n }];
    let layout = AttnLayout { heads, d, q_segs: &segs, kv_segs: &segs, causal: false };
    let (ctx, _) = attention(&q, &k, &v, &layout, 0.0, None, n);
    linear(&ctx, n, &p.wo, &p.bo)
}

/// Eval-mode encoder output (after the final layer norm), `[len, d_model]`.
pub(crate) fn encode<S: Scalar>(params: &ModelParams<S>, src: &[u32], lang: usize) -> Result<Vec<S>> {
    let cfg = &params.config;
    if lang >= cfg.languages.len() {
        return Err(Error::UnknownLanguage(format!("language index {lang}")));
    }
    let n = src.len();
    let mut x = embed(params, src, Some(lang), 0)?;
    for (i, layer) in params.encoder.iter().enumerate() {
        let ln = layer_norm(&x, n, &layer.ln_attn);
        add_into(&mut x, &self_attention(&layer.self_attn, &ln.y, n, cfg.heads, cfg.d_model));
        let ln = layer_norm(&x, n, &layer.ln_ffn);
        add_into(&mut x, &ffn(&layer.ffn, &ln.y, n));
        check_finite(&x, &format!("encoder.{i}"))?;
    }
    Ok(layer_norm(&x, n, &params.enc_ln).y)
}

impl<'a, S: Scalar> IncrementalDecoder<'a, S> {
    /// Encodes `src` (language index `lang`) and precomputes cross-attention keys/values.
    pub fn new(params: &'a ModelParams<S>, src: &[u32], lang: usize) -> Result<Self> {
        let memory = encode(params, src, lang)?;
        let n_src = src.len();
        let mut cross_k = Vec::with_capacity(params.decoder.len());
        let mut cross_v = Vec::with_capacity(params.decoder.len());
        for layer in &params.decoder {
            let p = &layer.cross_attn;
            cross_k.push(linear(&memory, n_src, &p.wk, &p.bk));
            cross_v.push(linear(&memory, n_src, &p.wv, &p.bv));
        }
        Ok(IncrementalDecoder { params, n_src, cross_k, cross_v })
    }

    pub fn source_len(&self) -> usize {
        self.n_src
    }

    pub fn initial_state(&self) -> DecoderState<S> {
        let layers = self.params.decoder.len();
        DecoderState { keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], len: 0 }
    }

    /// Feeds `token` at the next position and returns log-probabilities of
    /// the following token.
    pub fn step(&self, state: &mut DecoderState<S>, token: u32) -> Result<Vec<S>> {
        let cfg = &self.params.config;
        let (d, h, v) = (cfg.d_model, cfg.heads, cfg.vocab_size);
        let pos = state.len;
        let mut y = embed(self.params, &[token], None, pos)?;
        let len = pos + 1;
        for (i, layer) in self.params.decoder.iter().enumerate() {
            let ln = layer_norm(&y, 1, &layer.ln_self);
            let p = &layer.self_attn;
            let q = linear(&ln.y, 1, &p.wq, &p.bq);
            state.keys[i].extend(linear(&ln.y, 1, &p.wk, &p.bk));
            state.values[i].extend(linear(&ln.y, 1, &p.wv, &p.bv));
            let q_segs = [Segment { start: 0, len: 1 }];
            let kv_segs = [Segment { start: 0, len }];
            let layout = AttnLayout { heads: h, d, q_segs: &q_segs, kv_segs: &kv_segs, causal: false };
            let (ctx, _) = attention(&q, &state.keys[i], &state.values[i], &layout, 0.0, None, 1);
            add_into(&mut y, &linear(&ctx, 1, &p.wo, &p.bo));

            let ln = layer_norm(&y, 1, &layer.ln_cross);
            let p = &layer.cross_attn;
            let q = linear(&ln.y, 1, &p.wq, &p.bq);
            let kv_segs = [Segment { start: 0, len: self.n_src }];
            let layout = AttnLayout { heads: h, d, q_segs: &q_segs, kv_segs: &kv_segs, causal: false };
            let (ctx, _) = attention(&q, &self.cross_k[i], &self.cross_v[i], &layout, 0.0, None, 1);
            add_into(&mut y, &linear(&ctx, 1, &p.wo, &p.bo));

            let ln = layer_norm(&y, 1, &layer.ln_ffn);
            add_into(&mut y, &ffn(&layer.ffn, &ln.y, 1));
            check_finite(&y, &format!("decoder.{i}"))?;
        }
        state.len = len;
        let z = layer_norm(&y, 1, &self.params.dec_ln).y;
        let mut logits = vec![S::zero(); v];
        gemm(
            S::one(),
            &z, View::full(1, d), false,
            &self.params.tok_emb.data, View::full(v, d), true,
            S::zero(), &mut logits, View::full(1, v),
        );
        let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
        for x in logits.iter_mut() {
            *x = *x - lse;
        }
        check_finite(&logits, "output projection")?;
        Ok(logits)
    }
}
