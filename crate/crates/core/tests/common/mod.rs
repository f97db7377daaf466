//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use docnmt::decode::length_penalty;
use docnmt::model::{init_model, loss_and_grads, token_log_probs, Batch, IncrementalDecoder, ModelConfig, ModelParams};
use docnmt::tokenizer::{BOS, EOS, PAD, SEN};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- gradients

pub struct GradReport {
    /// `(tensor, coordinates checked, tensor size)`.
    pub per_tensor: Vec<(String, usize, usize)>,
    pub worst: f64,
    pub worst_at: String,
}

pub fn toy_config(d_model: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model,
        d_ff: 2 * d_model,
        vocab_size: 50,
        languages: vec!["aa".into(), "bb".into()],
        dropout_residual: 0.0,
        dropout_attention: 0.0,
        label_smoothing: 0.1,
        max_positions: 64,
    }
}

pub fn toy_batch() -> Batch {
    let src: [&[u32]; 2] = [&[7, 8, 9, 4, 10, 11], &[20, 21, 22]];
    let tgt: [&[u32]; 2] = [&[2, 12, 13, 4, 15, 16, 3], &[2, 30, 31, 3]];
    Batch::from_sequences(&src, &tgt, &[0, 1]).unwrap()
}

/// Central differences with step `h` on `min(per_tensor, size)` random
/// coordinates of every tensor. Gains and biases are perturbed away from
/// their initial values first so their gradients are non-trivial.
pub fn gradient_check(config: &ModelConfig, per_tensor: usize, seed: u64) -> GradReport {
    let mut params = init_model(config, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in params.tensors_mut() {
        if t.shape.len() == 1 {
            for x in &mut t.data {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let batch = toy_batch();
    let loss = |p: &ModelParams<f64>| loss_and_grads(p, &batch, None).unwrap().0;
    let (_, grads) = loss_and_grads(&params, &batch, None).unwrap();
    let h = 1e-5;
    let mut report = GradReport { per_tensor: Vec::new(), worst: 0.0, worst_at: String::new() };
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        let size = params.tensors()[ti].1.data.len();
        let analytic = grads.tensors()[ti].1.data.clone();
        let coords = sample(&mut rng, size, size.min(per_tensor)).into_vec();
        for &i in &coords {
            let orig = params.tensors()[ti].1.data[i];
            params.tensors_mut()[ti].1.data[i] = orig + h;
            let up = loss(&params);
            params.tensors_mut()[ti].1.data[i] = orig - h;
            let down = loss(&params);
            params.tensors_mut()[ti].1.data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > report.worst {
                report.worst = err;
                report.worst_at = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
        report.per_tensor.push((name.clone(), coords.len(), size));
    }
    report
}

// ----------------------------------------------------------------- pronouns

pub const PRONOUNS: [&str; 8] = ["he", "his", "him", "himself", "she", "her", "hers", "herself"];

/// Lowercase, split on whitespace, strip leading/trailing non-alphanumerics,
/// by walking characters.
fn words(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in sentence.split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut a = 0;
        let mut b = chars.len();
        while a < b && !chars[a].is_alphanumeric() {
            a += 1;
        }
        while b > a && !chars[b - 1].is_alphanumeric() {
            b -= 1;
        }
        out.push(chars[a..b].iter().collect::<String>().to_lowercase());
    }
    out
}

/// `(matched, hyp_total, ref_total)`, matching each hypothesis pronoun to an
/// unused identical reference pronoun of the same sentence.
pub fn pronoun_oracle_counts(hyps: &[String], refs: &[String]) -> (u64, u64, u64) {
    let (mut matched, mut hyp_total, mut ref_total) = (0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let hp: Vec<String> = words(h).into_iter().filter(|w| PRONOUNS.contains(&w.as_str())).collect();
        let mut rp: Vec<Option<String>> =
            words(r).into_iter().filter(|w| PRONOUNS.contains(&w.as_str())).map(Some).collect();
        hyp_total += hp.len() as u64;
        ref_total += rp.len() as u64;
        for w in hp {
            if let Some(slot) = rp.iter_mut().find(|s| s.as_deref() == Some(w.as_str())) {
                *slot = None;
                matched += 1;
            }
        }
    }
    (matched, hyp_total, ref_total)
}

/// `(precision, recall, f1)`; both totals zero counts as perfect agreement.
pub fn pronoun_oracle(hyps: &[String], refs: &[String]) -> (f64, f64, f64) {
    let (m, h, r) = pronoun_oracle_counts(hyps, refs);
    if h == 0 && r == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if h == 0 { 0.0 } else { m as f64 / h as f64 };
    let rc = if r == 0 { 0.0 } else { m as f64 / r as f64 };
    let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
    (p, rc, f)
}

/// Sentences mixing pronouns (with case and punctuation variants) and fillers.
pub fn random_pronoun_sentences(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    const FILL: [&str; 9] = ["the", "cat", "it", "they", "hi", "hes", "shed", "here", "them"];
    (0..n)
        .map(|_| {
            let len = rng.gen_range(0..8);
            (0..len)
                .map(|_| {
                    let w = if rng.gen_bool(0.5) { PRONOUNS[rng.gen_range(0..8)] } else { FILL[rng.gen_range(0..9)] };
                    let w = if rng.gen_bool(0.2) { w.to_uppercase() } else { w.to_string() };
                    match rng.gen_range(0..6) {
                        0 => format!("{w},"),
                        1 => format!("\"{w}"),
                        2 => format!("{w}'"),
                        _ => w,
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

// ------------------------------------------------------------------ decoding

/// Greedy decoding under the same constraints as beam search: no `PAD`/`BOS`,
/// no `EOS` at the first step or before `required - 1` `[SEN]` ids.
/// Returns the ids and whether `EOS` was reached.
pub fn greedy(params: &ModelParams<f32>, src: &[u32], lang: usize, max_len: usize, required: usize) -> (Vec<u32>, bool) {
    let dec = IncrementalDecoder::new(params, src, lang).unwrap();
    let mut state = dec.initial_state();
    let mut lp = dec.step(&mut state, BOS).unwrap();
    let mut ids = Vec::new();
    let mut sens = 0;
    for t in 1..=max_len {
        let mut best: Option<(u32, f32)> = None;
        for (v, &x) in lp.iter().enumerate() {
            let v = v as u32;
            if v == PAD || v == BOS || (v == EOS && (t == 1 || sens + 1 < required)) {
                continue;
            }
            if best.is_none_or(|(_, b)| x > b) {
                best = Some((v, x));
            }
        }
        let (v, _) = best.unwrap();
        ids.push(v);
        if v == EOS {
            return (ids, true);
        }
        sens += usize::from(v == SEN);
        if t < max_len {
            lp = dec.step(&mut state, v).unwrap();
        }
    }
    (ids, false)
}

/// Every admissible finished output of length `<= max_len` with its
/// length-normalized score, computed by teacher forcing.
pub fn exhaustive(
    params: &ModelParams<f32>,
    src: &[u32],
    lang: usize,
    max_len: usize,
    required: usize,
    alpha: f64,
) -> Vec<(Vec<u32>, f64)> {
    let v = params.config.vocab_size as u32;
    let body: Vec<u32> = (0..v).filter(|&t| t != PAD && t != BOS && t != EOS).collect();
    let mut prefixes: Vec<Vec<u32>> = vec![Vec::new()];
    let mut outputs: Vec<Vec<u32>> = Vec::new();
    for len in 1..=max_len {
        for p in &prefixes {
            let sens = p.iter().filter(|&&t| t == SEN).count();
            if len > 1 && sens + 1 >= required {
                let mut o = p.clone();
                o.push(EOS);
                outputs.push(o);
            }
        }
        if len < max_len {
            prefixes = prefixes
                .iter()
                .flat_map(|p| body.iter().map(move |&t| [p.as_slice(), &[t]].concat()))
                .collect();
        }
    }
    let mut scored = Vec::with_capacity(outputs.len());
    for chunk in outputs.chunks(256) {
        let tgts: Vec<Vec<u32>> = chunk.iter().map(|o| [&[BOS][..], o].concat()).collect();
        let srcs: Vec<&[u32]> = vec![src; chunk.len()];
        let tgt_refs: Vec<&[u32]> = tgts.iter().map(Vec::as_slice).collect();
        let batch = Batch::from_sequences(&srcs, &tgt_refs, &vec![lang; chunk.len()]).unwrap();
        for (o, lps) in chunk.iter().zip(token_log_probs(params, &batch).unwrap()) {
            let logprob: f64 = lps.iter().map(|&x| x as f64).sum();
            scored.push((o.clone(), logprob / length_penalty(o.len(), alpha)));
        }
    }
    scored
}

/// A random model with vocabulary `v` over one language.
pub fn micro_model(v: usize, seed: u64) -> ModelParams<f32> {
    let config = ModelConfig { vocab_size: v, ..ModelConfig::tiny(v, vec!["xx".into()]) };
    let mut params = init_model(&config, seed).unwrap();
    // sharpen the output distribution so scores are well separated
    for x in &mut params.tok_emb.data {
        *x *= 4.0;
    }
    params
}
