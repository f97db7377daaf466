//! Compact pre-norm encoder-decoder transformer.
//!
//! Source embeddings are `token_emb * sqrt(d_model) + position + lang_emb`:
//! the language signal is an embedding added at every source position, not an
//! extra sequence element. The token embedding table is shared by the encoder
//! input, the decoder input and the output projection. Position encodings are
//! sinusoidal and continuous across `[SEN]` boundaries.

mod infer;
mod ops;
mod train;

pub use infer::{DecoderState, IncrementalDecoder};
pub use train::{
    backward, example_losses, first_decoder_attention, first_encoder_attention, forward, loss_and_grads,
    token_log_probs, Batch,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::rng::derived_rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub languages: Vec<String>,
    pub dropout_residual: f64,
    pub dropout_attention: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Transformer-base sizes with the heavy dropout used for document models.
    pub fn full(vocab_size: usize, languages: Vec<String>) -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            vocab_size,
            languages,
            dropout_residual: 0.5,
            dropout_attention: 0.2,
            label_smoothing: 0.1,
            max_positions: 1024,
        }
    }

    /// Desk-scale default.
    pub fn desk(vocab_size: usize, languages: Vec<String>) -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            languages,
            dropout_residual: 0.1,
            dropout_attention: 0.0,
            label_smoothing: 0.1,
            max_positions: 1024,
        }
    }

    /// Smallest preset, for fast tests.
    pub fn tiny(vocab_size: usize, languages: Vec<String>) -> Self {
        Self {
            layers: 1,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size,
            languages,
            dropout_residual: 0.0,
            dropout_attention: 0.0,
            label_smoothing: 0.1,
            max_positions: 512,
        }
    }

    pub fn preset(name: &str, vocab_size: usize, languages: Vec<String>) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(vocab_size, languages)),
            "desk" => Ok(Self::desk(vocab_size, languages)),
            "tiny" => Ok(Self::tiny(vocab_size, languages)),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layers, heads, d_model and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size <= crate::tokenizer::NUM_FIXED_SPECIALS + self.languages.len() {
            return fail(format!("vocab_size {} leaves no room for ordinary tokens", self.vocab_size));
        }
        if self.languages.is_empty() {
            return fail("at least one language is required".into());
        }
        for (name, rate) in [("dropout_residual", self.dropout_residual), ("dropout_attention", self.dropout_attention)] {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("{name}={rate} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing={} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn language_index(&self, lang: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// Names of fields that differ from `other`.
    pub fn differences(&self, other: &Self) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => { $( if self.$f != other.$f { out.push(stringify!($f)); } )* };
        }
        cmp!(layers, heads, d_model, d_ff, vocab_size, languages, dropout_residual,
             dropout_attention, label_smoothing, max_positions);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Projection weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<S> {
    pub ln_attn: LayerNormParams<S>,
    pub self_attn: AttentionParams<S>,
    pub ln_ffn: LayerNormParams<S>,
    pub ffn: FeedForwardParams<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<S> {
    pub ln_self: LayerNormParams<S>,
    pub self_attn: AttentionParams<S>,
    pub ln_cross: LayerNormParams<S>,
    pub cross_attn: AttentionParams<S>,
    pub ln_ffn: LayerNormParams<S>,
    pub ffn: FeedForwardParams<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    /// `[vocab, d_model]`, shared by source, target and output projection.
    pub tok_emb: Tensor<S>,
    /// `[languages, d_model]`
    pub lang_emb: Tensor<S>,
    pub encoder: Vec<EncoderLayer<S>>,
    pub enc_ln: LayerNormParams<S>,
    pub decoder: Vec<DecoderLayer<S>>,
    pub dec_ln: LayerNormParams<S>,
}

fn ln_params<S: Scalar>(d: usize) -> LayerNormParams<S> {
    LayerNormParams {
        gain: Tensor::filled(&[d], S::one()),
        bias: Tensor::zeros(&[d]),
    }
}

fn attn_params<S: Scalar>(d: usize) -> AttentionParams<S> {
    AttentionParams {
        wq: Tensor::zeros(&[d, d]),
        bq: Tensor::zeros(&[d]),
        wk: Tensor::zeros(&[d, d]),
        bk: Tensor::zeros(&[d]),
        wv: Tensor::zeros(&[d, d]),
        bv: Tensor::zeros(&[d]),
        wo: Tensor::zeros(&[d, d]),
        bo: Tensor::zeros(&[d]),
    }
}

fn ffn_params<S: Scalar>(d: usize, ff: usize) -> FeedForwardParams<S> {
    FeedForwardParams {
        w1: Tensor::zeros(&[d, ff]),
        b1: Tensor::zeros(&[ff]),
        w2: Tensor::zeros(&[ff, d]),
        b2: Tensor::zeros(&[d]),
    }
}

macro_rules! visit_ln {
    ($out:ident, $p:expr, $prefix:expr, $($r:tt)*) => {
        $out.push((format!("{}.gain", $prefix), & $($r)* $p.gain));
        $out.push((format!("{}.bias", $prefix), & $($r)* $p.bias));
    };
}

macro_rules! visit_attn {
    ($out:ident, $p:expr, $prefix:expr, $($r:tt)*) => {
        $out.push((format!("{}.wq", $prefix), & $($r)* $p.wq));
        $out.push((format!("{}.bq", $prefix), & $($r)* $p.bq));
        $out.push((format!("{}.wk", $prefix), & $($r)* $p.wk));
        $out.push((format!("{}.bk", $prefix), & $($r)* $p.bk));
        $out.push((format!("{}.wv", $prefix), & $($r)* $p.wv));
        $out.push((format!("{}.bv", $prefix), & $($r)* $p.bv));
        $out.push((format!("{}.wo", $prefix), & $($r)* $p.wo));
        $out.push((format!("{}.bo", $prefix), & $($r)* $p.bo));
    };
}

macro_rules! visit_ffn {
    ($out:ident, $p:expr, $prefix:expr, $($r:tt)*) => {
        $out.push((format!("{}.w1", $prefix), & $($r)* $p.w1));
        $out.push((format!("{}.b1", $prefix), & $($r)* $p.b1));
        $out.push((format!("{}.w2", $prefix), & $($r)* $p.w2));
        $out.push((format!("{}.b2", $prefix), & $($r)* $p.b2));
    };
}

impl<S: Scalar> ModelParams<S> {
    /// Every entry zero; also the shape of gradients and optimizer moments.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Ok(Self::identity_norms(config)?.zeros_like())
    }

    /// Linear weights and embeddings zero, layer-norm gains one.
    pub fn identity_norms(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let enc = || EncoderLayer {
            ln_attn: ln_params(d),
            self_attn: attn_params(d),
            ln_ffn: ln_params(d),
            ffn: ffn_params(d, config.d_ff),
        };
        let dec = || DecoderLayer {
            ln_self: ln_params(d),
            self_attn: attn_params(d),
            ln_cross: ln_params(d),
            cross_attn: attn_params(d),
            ln_ffn: ln_params(d),
            ffn: ffn_params(d, config.d_ff),
        };
        Ok(Self {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[config.vocab_size, d]),
            lang_emb: Tensor::zeros(&[config.languages.len(), d]),
            encoder: (0..config.layers).map(|_| enc()).collect(),
            enc_ln: ln_params(d),
            decoder: (0..config.layers).map(|_| dec()).collect(),
            dec_ln: ln_params(d),
        })
    }

    /// Same shapes with every entry zero (a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = S::zero());
        }
        out
    }

    /// All tensors with stable names, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        out.push(("tok_emb".to_string(), &self.tok_emb));
        out.push(("lang_emb".to_string(), &self.lang_emb));
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{i}");
            visit_ln!(out, l.ln_attn, format!("{p}.ln_attn"),);
            visit_attn!(out, l.self_attn, format!("{p}.self_attn"),);
            visit_ln!(out, l.ln_ffn, format!("{p}.ln_ffn"),);
            visit_ffn!(out, l.ffn, format!("{p}.ffn"),);
        }
        visit_ln!(out, self.enc_ln, "enc_ln",);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{i}");
            visit_ln!(out, l.ln_self, format!("{p}.ln_self"),);
            visit_attn!(out, l.self_attn, format!("{p}.self_attn"),);
            visit_ln!(out, l.ln_cross, format!("{p}.ln_cross"),);
            visit_attn!(out, l.cross_attn, format!("{p}.cross_attn"),);
            visit_ln!(out, l.ln_ffn, format!("{p}.ln_ffn"),);
            visit_ffn!(out, l.ffn, format!("{p}.ffn"),);
        }
        visit_ln!(out, self.dec_ln, "dec_ln",);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        out.push(("tok_emb".to_string(), &mut self.tok_emb));
        out.push(("lang_emb".to_string(), &mut self.lang_emb));
        for (i, l) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            visit_ln!(out, l.ln_attn, format!("{p}.ln_attn"), mut);
            visit_attn!(out, l.self_attn, format!("{p}.self_attn"), mut);
            visit_ln!(out, l.ln_ffn, format!("{p}.ln_ffn"), mut);
            visit_ffn!(out, l.ffn, format!("{p}.ffn"), mut);
        }
        visit_ln!(out, self.enc_ln, "enc_ln", mut);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            visit_ln!(out, l.ln_self, format!("{p}.ln_self"), mut);
            visit_attn!(out, l.self_attn, format!("{p}.self_attn"), mut);
            visit_ln!(out, l.ln_cross, format!("{p}.ln_cross"), mut);
            visit_attn!(out, l.cross_attn, format!("{p}.cross_attn"), mut);
            visit_ln!(out, l.ln_ffn, format!("{p}.ln_ffn"), mut);
            visit_ffn!(out, l.ffn, format!("{p}.ffn"), mut);
        }
        visit_ln!(out, self.dec_ln, "dec_ln", mut);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let mut out = ModelParams::<T>::zeros(&self.config).expect("config already validated");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Scaled uniform initialization: Xavier-uniform projections, `U(±sqrt(3/d))`
/// token embeddings (unit variance after the `sqrt(d)` scale), `U(±0.5)`
/// language embeddings, zero biases and unit layer-norm gains.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    let mut params = ModelParams::<f32>::identity_norms(config)?;
    let d = config.d_model as f64;
    for (idx, (name, t)) in params.tensors_mut().into_iter().enumerate() {
        let bound = if name == "tok_emb" {
            (3.0 / d).sqrt()
        } else if name == "lang_emb" {
            0.5
        } else if t.shape.len() == 2 {
            (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt()
        } else {
            continue;
        };
        let mut rng = derived_rng(seed, &[idx as u64]);
        for x in &mut t.data {
            *x = rng.gen_range(-bound..bound) as f32;
        }
    }
    Ok(params)
}

/// Sinusoidal position encoding rows `[0, len)`.
pub fn positional_table<S: Scalar>(len: usize, d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = S::from_f64(angle.sin());
            out[pos * d + 2 * i + 1] = S::from_f64(angle.cos());
        }
        if d % 2 == 1 {
            out[pos * d + d - 1] = S::from_f64((pos as f64).sin());
        }
    }
    out
}

/// `token_emb(id) * sqrt(d_model) + pos(t) + lang_emb(lang)`, before dropout.
pub fn embed_source<S: Scalar>(params: &ModelParams<S>, src_ids: &[u32], lang: &str) -> Result<Tensor<S>> {
    let li = params.config.language_index(lang)?;
    let out = ops::embed(params, src_ids, Some(li), 0)?;
    Ok(Tensor {
        shape: vec![src_ids.len(), params.config.d_model],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 50,
            languages: vec!["de".into(), "fr".into()],
            dropout_residual: 0.1,
            dropout_attention: 0.1,
            label_smoothing: 0.1,
            max_positions: 64,
        }
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let a = init_model(&cfg(), 3).unwrap();
        let b = init_model(&cfg(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(&cfg(), 4).unwrap());
        assert!(a.all_finite());
        assert!(a.encoder[0].ln_attn.gain.data.iter().all(|&g| g == 1.0));
        assert!(a.dec_ln.gain.data.iter().all(|&g| g == 1.0));
        assert!(a.decoder[1].ffn.b1.data.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = cfg();
        c.heads = 3;
        assert!(matches!(init_model(&c, 1), Err(Error::Config(_))));
        c.heads = 2;
        c.dropout_residual = 1.0;
        assert!(init_model(&c, 1).is_err());
    }

    #[test]
    fn tensor_names_are_unique_and_stable() {
        let p = init_model(&cfg(), 1).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "tok_emb");
        assert!(names.contains(&"decoder.1.cross_attn.wk".to_string()));
        let mut q = p.clone();
        let muts: Vec<String> = q.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(muts, names);
    }

    #[test]
    fn language_embedding_is_additive() {
        let mut p = init_model(&cfg(), 5).unwrap();
        let ids = [7u32, 9, 11];
        let de = embed_source(&p, &ids, "de").unwrap();
        let fr = embed_source(&p, &ids, "fr").unwrap();
        assert_eq!(de.shape, vec![3, 16]);
        let d = 16;
        for t in 0..3 {
            for j in 0..d {
                let diff = de.data[t * d + j] - fr.data[t * d + j];
                let want = p.lang_emb.data[j] - p.lang_emb.data[d + j];
                assert!((diff - want).abs() < 1e-5);
            }
        }
        p.lang_emb.data.iter_mut().for_each(|x| *x = 0.0);
        let plain = embed_source(&p, &ids, "de").unwrap();
        let pe = positional_table::<f32>(3, d);
        for t in 0..3 {
            for j in 0..d {
                let want = p.tok_emb.data[ids[t] as usize * d + j] * 4.0 + pe[t * d + j];
                assert!((plain.data[t * d + j] - want).abs() < 1e-6);
            }
        }
        assert!(matches!(embed_source(&p, &ids, "xx"), Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn config_differences_are_listed() {
        let a = cfg();
        let mut b = cfg();
        b.vocab_size = 60;
        b.layers = 3;
        assert_eq!(a.differences(&b), vec!["layers", "vocab_size"]);
    }
}
