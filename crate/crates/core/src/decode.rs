//! Beam search and the two inference modes.
//!
//! SenInfer decodes each sentence on its own. DocInfer decodes chunks of `D`
//! consecutive sentences and keeps `EOS` masked until the hypothesis has
//! emitted `k - 1` `[SEN]` ids, so the output can be split back into `k`
//! sentences.

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::d2d::{chunk_document, encode_sentences, split_translation};
use crate::error::{Error, Result};
use crate::model::{DecoderState, IncrementalDecoder, ModelParams};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, PAD, SEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    Sen,
    Doc,
}

impl std::str::FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sen" => Ok(InferMode::Sen),
            "doc" => Ok(InferMode::Doc),
            other => Err(Error::Config(format!("unknown inference mode `{other}` (expected sen or doc)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    pub alpha: f64,
    /// Generated-token budget including `EOS`; `None` means `2·source + 50`.
    pub max_len: Option<usize>,
    pub mode: InferMode,
    pub d: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 4, alpha: 0.6, max_len: None, mode: InferMode::Doc, d: 5 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(format!("length penalty alpha={} must be non-negative", self.alpha)));
        }
        if self.d == 0 {
            return Err(Error::Config("D must be at least 1".into()));
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("max output length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn max_len_for(&self, src_len: usize) -> usize {
        self.max_len.unwrap_or(2 * src_len + 50)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, without `BOS`; ends in `EOS` when finished.
    pub ids: Vec<TokenId>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
    pub sen_count: usize,
    /// The length budget ran out before any hypothesis finished.
    pub forced_stop: bool,
}

/// `((5 + length) / 6)^alpha`.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

/// Next-token log-probabilities for a fixed source.
pub trait Session {
    type State: Clone;
    /// State after consuming `BOS`, and the log-probabilities that follow it.
    fn start(&self) -> Result<(Self::State, Vec<f32>)>;
    fn step(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f32>>;
}

/// Anything that can open a decoding session for a source sequence.
pub trait Translator {
    type Session<'a>: Session
    where
        Self: 'a;
    fn open(&self, src: &[TokenId]) -> Result<Self::Session<'_>>;
}

/// A trained model decoding into the language with index `lang`.
pub struct NeuralTranslator<'p> {
    pub params: &'p ModelParams<f32>,
    pub lang: usize,
}

pub struct NeuralSession<'p>(IncrementalDecoder<'p, f32>);

impl Session for NeuralSession<'_> {
    type State = DecoderState<f32>;

    fn start(&self) -> Result<(Self::State, Vec<f32>)> {
        let mut state = self.0.initial_state();
        let lp = self.0.step(&mut state, BOS)?;
        Ok((state, lp))
    }

    fn step(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f32>> {
        self.0.step(state, token)
    }
}

impl Translator for NeuralTranslator<'_> {
    type Session<'a> = NeuralSession<'a> where Self: 'a;

    fn open(&self, src: &[TokenId]) -> Result<NeuralSession<'_>> {
        Ok(NeuralSession(IncrementalDecoder::new(self.params, src, self.lang)?))
    }
}

struct Live<St> {
    ids: Vec<TokenId>,
    logprob: f64,
    sen_count: usize,
    state: St,
    next: Vec<f32>,
}

/// Beam search over one source.
///
/// Each step expands every live hypothesis and keeps the `beam` best
/// candidates by accumulated log-probability; candidates ending in `EOS` move
/// to the finished set. Search stops once `beam` hypotheses have finished, no
/// live ones remain, or the length budget is spent. `EOS` is unavailable at
/// the first step and while fewer than `required_sens - 1` `[SEN]` ids have
/// been emitted; `PAD` and `BOS` are never generated.
pub fn beam_search_with<T: Translator>(
    model: &T,
    src: &[TokenId],
    config: &BeamConfig,
    required_sens: usize,
) -> Result<Hypothesis> {
    Ok(beam_search_outcome(model, src, config, required_sens)?.best)
}

/// Result of a search together with every hypothesis that finished.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutcome {
    /// Highest length-normalized score among `finished`, or the best
    /// unfinished hypothesis (flagged as forced stop) when nothing finished.
    pub best: Hypothesis,
    pub finished: Vec<Hypothesis>,
}

/// [`beam_search_with`], also returning the finished set.
pub fn beam_search_outcome<T: Translator>(
    model: &T,
    src: &[TokenId],
    config: &BeamConfig,
    required_sens: usize,
) -> Result<BeamOutcome> {
    config.validate()?;
    if required_sens == 0 {
        return Err(Error::Config("required sentence count must be at least 1".into()));
    }
    let session = model.open(src)?;
    let max_len = config.max_len_for(src.len());
    let (state, next) = session.start()?;
    let mut live = vec![Live { ids: Vec::new(), logprob: 0.0, sen_count: 0, state, next }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 1..=max_len {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let eos_allowed = t > 1 && hyp.sen_count + 1 >= required_sens;
            for (v, &lp) in hyp.next.iter().enumerate() {
                let v = v as TokenId;
                if v == PAD || v == BOS || (v == EOS && !eos_allowed) || lp == f32::NEG_INFINITY {
                    continue;
                }
                cands.push((hyp.logprob + lp as f64, h, v));
            }
        }
        // descending score, ties broken by hypothesis then token order
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(config.beam);
        let mut grown = Vec::new();
        for &(logprob, h, v) in &cands {
            let parent = &live[h];
            let mut ids = parent.ids.clone();
            ids.push(v);
            let sen_count = parent.sen_count + usize::from(v == SEN);
            if v == EOS {
                let score = logprob / length_penalty(ids.len(), config.alpha);
                finished.push(Hypothesis { ids, logprob, score, finished: true, sen_count, forced_stop: false });
            } else {
                grown.push((ids, logprob, sen_count, h));
            }
        }
        if finished.len() >= config.beam || grown.is_empty() || t == max_len {
            live = grown
                .into_iter()
                .map(|(ids, logprob, sen_count, h)| Live {
                    ids,
                    logprob,
                    sen_count,
                    state: live[h].state.clone(),
                    next: Vec::new(),
                })
                .collect();
            break;
        }
        let mut next_live = Vec::with_capacity(grown.len());
        for (ids, logprob, sen_count, h) in grown {
            let mut state = live[h].state.clone();
            let next = session.step(&mut state, *ids.last().unwrap())?;
            next_live.push(Live { ids, logprob, sen_count, state, next });
        }
        live = next_live;
    }
    let best = |hyps: &[Hypothesis]| {
        hyps.iter().fold(None::<&Hypothesis>, |best, h| match best {
            Some(b) if b.score >= h.score => Some(b),
            _ => Some(h),
        }).cloned()
    };
    if let Some(h) = best(&finished) {
        return Ok(BeamOutcome { best: h, finished });
    }
    let unfinished: Vec<Hypothesis> = live
        .into_iter()
        .map(|l| Hypothesis {
            score: l.logprob / length_penalty(l.ids.len().max(1), config.alpha),
            ids: l.ids,
            logprob: l.logprob,
            finished: false,
            sen_count: l.sen_count,
            forced_stop: true,
        })
        .collect();
    let best = best(&unfinished).unwrap_or(Hypothesis {
        ids: Vec::new(),
        logprob: 0.0,
        score: 0.0,
        finished: false,
        sen_count: 0,
        forced_stop: true,
    });
    Ok(BeamOutcome { best, finished })
}

pub fn beam_search(
    params: &ModelParams<f32>,
    src: &[TokenId],
    lang: usize,
    config: &BeamConfig,
    required_sens: usize,
) -> Result<Hypothesis> {
    beam_search_with(&NeuralTranslator { params, lang }, src, config, required_sens)
}

/// Per-document decoding report.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub chunks: usize,
    pub forced_stops: usize,
    pub dropped_empty: usize,
    pub source_sentences: usize,
    pub output_sentences: usize,
}

impl Diagnostics {
    pub fn count_preserved(&self) -> bool {
        self.source_sentences == self.output_sentences
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub sentences: Document,
    pub diagnostics: Diagnostics,
}

/// Splits a chunk hypothesis into sentences. A single-sentence chunk keeps
/// everything as one sentence, with any `[SEN]` read as a word boundary.
fn postprocess(ids: &[TokenId], k: usize, vocab: &Vocabulary, diag: &mut Diagnostics) -> Result<Vec<String>> {
    let split = split_translation(ids, vocab)?;
    diag.dropped_empty += split.dropped_empty;
    if k == 1 {
        let joined = split.sentences.join(" ");
        if joined.is_empty() {
            diag.dropped_empty += 1;
            return Ok(Vec::new());
        }
        return Ok(vec![joined]);
    }
    Ok(split.sentences)
}

fn infer_chunks<T: Translator>(
    model: &T,
    vocab: &Vocabulary,
    doc: &[String],
    config: &BeamConfig,
    d: usize,
) -> Result<Translation> {
    let mut diag = Diagnostics { source_sentences: doc.len(), ..Default::default() };
    let mut sentences = Vec::with_capacity(doc.len());
    if doc.is_empty() {
        return Ok(Translation { sentences, diagnostics: diag });
    }
    for chunk in chunk_document(doc, d)? {
        let k = chunk.k();
        let src = encode_sentences(vocab, &chunk.sentences);
        let hyp = beam_search_with(model, &src, config, k)?;
        diag.chunks += 1;
        diag.forced_stops += usize::from(hyp.forced_stop);
        sentences.extend(postprocess(&hyp.ids, k, vocab, &mut diag)?);
    }
    diag.output_sentences = sentences.len();
    Ok(Translation { sentences, diagnostics: diag })
}

/// Sentence-by-sentence decoding.
pub fn sen_infer<T: Translator>(model: &T, vocab: &Vocabulary, doc: &[String], config: &BeamConfig) -> Result<Translation> {
    infer_chunks(model, vocab, doc, config, 1)
}

/// Decoding of non-overlapping `config.d`-sentence chunks with the
/// sentence-count constraint.
pub fn doc_infer<T: Translator>(model: &T, vocab: &Vocabulary, doc: &[String], config: &BeamConfig) -> Result<Translation> {
    infer_chunks(model, vocab, doc, config, config.d)
}

/// Dispatches on `config.mode`.
pub fn translate_document<T: Translator>(
    model: &T,
    vocab: &Vocabulary,
    doc: &[String],
    config: &BeamConfig,
) -> Result<Translation> {
    match config.mode {
        InferMode::Sen => sen_infer(model, vocab, doc, config),
        InferMode::Doc => doc_infer(model, vocab, doc, config),
    }
}

/// Diagnostics sidecar: one tab-separated row per document.
pub fn diagnostics_tsv(diags: &[Diagnostics]) -> String {
    let mut out = String::from("doc\tchunks\tforced_stops\tdropped_empty\tsource_sentences\toutput_sentences\n");
    for (i, d) in diags.iter().enumerate() {
        out.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\t{}\n",
            d.chunks, d.forced_stops, d.dropped_empty, d.source_sentences, d.output_sentences
        ));
    }
    out
}
