//! D2D concatenation: `D` consecutive sentences become one sequence with
//! `[SEN]` between sentences, on both the source and the target side.

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, DocumentCorpus};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, NUM_FIXED_SPECIALS, PAD, SEN};

pub const DEFAULT_SENTENCE_LIMIT: usize = 100;
pub const DEFAULT_DOCUMENT_LIMIT: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub sentences: Vec<String>,
    pub doc_index: usize,
    pub start_index: usize,
}

impl Chunk {
    pub fn k(&self) -> usize {
        self.sentences.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sentence,
    Document,
}

/// Length limits in token ids, per mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub sentence: usize,
    pub document: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            sentence: DEFAULT_SENTENCE_LIMIT,
            document: DEFAULT_DOCUMENT_LIMIT,
        }
    }
}

impl Limits {
    pub fn for_mode(&self, mode: Mode) -> usize {
        match mode {
            Mode::Sentence => self.sentence,
            Mode::Document => self.document,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub src_ids: Vec<TokenId>,
    /// `BOS ... EOS`, possibly cut short by truncation.
    pub tgt_ids: Vec<TokenId>,
    /// Language token id (a reserved vocabulary id).
    pub lang: TokenId,
    pub k: usize,
    pub truncated: bool,
}

impl TrainingExample {
    /// Row of the language embedding table.
    pub fn lang_index(&self) -> usize {
        self.lang as usize - NUM_FIXED_SPECIALS
    }

    pub fn is_document(&self) -> bool {
        self.k > 1
    }
}

/// Splits a document into `ceil(len / d)` consecutive non-overlapping chunks;
/// only the last may hold fewer than `d` sentences.
pub fn chunk_document(doc: &[String], d: usize) -> Result<Vec<Chunk>> {
    if d == 0 {
        return Err(Error::Config("chunk size D must be at least 1".into()));
    }
    Ok(doc
        .chunks(d)
        .enumerate()
        .map(|(i, sents)| Chunk {
            sentences: sents.to_vec(),
            doc_index: 0,
            start_index: i * d,
        })
        .collect())
}

pub fn chunk_corpus(corpus: &DocumentCorpus, d: usize) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for (doc_index, doc) in corpus.docs.iter().enumerate() {
        out.extend(chunk_document(doc, d)?.into_iter().map(|mut c| {
            c.doc_index = doc_index;
            c
        }));
    }
    Ok(out)
}

/// Sentence ids joined by `[SEN]`.
pub fn encode_sentences<S: AsRef<str>>(vocab: &Vocabulary, sentences: &[S]) -> Vec<TokenId> {
    let mut ids = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            ids.push(SEN);
        }
        ids.extend(vocab.encode(s.as_ref()));
    }
    ids
}

pub fn make_training_example(
    src: &Chunk,
    tgt: &Chunk,
    lang_tok: TokenId,
    vocab: &Vocabulary,
    mode: Mode,
) -> Result<TrainingExample> {
    make_training_example_with_limits(src, tgt, lang_tok, vocab, mode, Limits::default())
}

/// Truncation drops trailing ids (on the target this may drop `EOS`).
pub fn make_training_example_with_limits(
    src: &Chunk,
    tgt: &Chunk,
    lang_tok: TokenId,
    vocab: &Vocabulary,
    mode: Mode,
    limits: Limits,
) -> Result<TrainingExample> {
    if src.k() != tgt.k() {
        return Err(Error::Alignment(format!(
            "source chunk has {} sentences, target chunk has {}",
            src.k(),
            tgt.k()
        )));
    }
    if mode == Mode::Sentence && src.k() != 1 {
        return Err(Error::Config(format!(
            "sentence-mode example needs exactly one sentence, got {}",
            src.k()
        )));
    }
    if !vocab.is_special(lang_tok) || (lang_tok as usize) < NUM_FIXED_SPECIALS {
        return Err(Error::Config(format!("id {lang_tok} is not a language token")));
    }
    let limit = limits.for_mode(mode);
    let mut src_ids = encode_sentences(vocab, &src.sentences);
    let mut tgt_ids = vec![BOS];
    tgt_ids.extend(encode_sentences(vocab, &tgt.sentences));
    tgt_ids.push(EOS);
    let truncated = src_ids.len() > limit || tgt_ids.len() > limit;
    src_ids.truncate(limit);
    tgt_ids.truncate(limit);
    Ok(TrainingExample {
        src_ids,
        tgt_ids,
        lang: lang_tok,
        k: src.k(),
        truncated,
    })
}

/// Examples for every aligned chunk of a parallel corpus.
pub fn make_examples(
    src: &DocumentCorpus,
    tgt: &DocumentCorpus,
    d: usize,
    lang_tok: TokenId,
    vocab: &Vocabulary,
    mode: Mode,
    limits: Limits,
) -> Result<Vec<TrainingExample>> {
    crate::corpus::check_alignment(src, tgt)?;
    let src_chunks = chunk_corpus(src, d)?;
    let tgt_chunks = chunk_corpus(tgt, d)?;
    src_chunks
        .iter()
        .zip(&tgt_chunks)
        .map(|(s, t)| make_training_example_with_limits(s, t, lang_tok, vocab, mode, limits))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitResult {
    pub sentences: Vec<String>,
    /// Empty segments from leading, trailing or adjacent `[SEN]` ids.
    pub dropped_empty: usize,
}

pub fn split_translation(ids: &[TokenId], vocab: &Vocabulary) -> Result<SplitResult> {
    let body: Vec<TokenId> = ids
        .iter()
        .copied()
        .filter(|&id| id != BOS && id != EOS && id != PAD)
        .collect();
    let mut out = SplitResult::default();
    for segment in body.split(|&id| id == SEN) {
        let text = vocab.decode(segment)?;
        if text.is_empty() {
            out.dropped_empty += 1;
        } else {
            out.sentences.push(text);
        }
    }
    Ok(out)
}

/// Concatenated chunk sentences of one document, in order.
pub fn reassemble(chunks: &[Chunk]) -> Document {
    chunks.iter().flat_map(|c| c.sentences.iter().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;
    use proptest::prelude::*;

    fn doc(n: usize) -> Document {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn vocab() -> Vocabulary {
        let c = DocumentCorpus::new("xx", vec![vec!["x y".into(), "a b c".into()]]).unwrap();
        train_bpe(&[&c], 30, &["de".to_string()]).unwrap()
    }

    fn chunk(sents: &[&str]) -> Chunk {
        Chunk {
            sentences: sents.iter().map(|s| s.to_string()).collect(),
            doc_index: 0,
            start_index: 0,
        }
    }

    #[test]
    fn chunk_sizes() {
        let sizes = |n, d| chunk_document(&doc(n), d).unwrap().iter().map(Chunk::k).collect::<Vec<_>>();
        assert_eq!(sizes(7, 5), vec![5, 2]);
        assert_eq!(sizes(5, 5), vec![5]);
        assert_eq!(sizes(3, 1), vec![1, 1, 1]);
        assert!(chunk_document(&doc(3), 0).is_err());
        let c = chunk_document(&doc(7), 5).unwrap();
        assert_eq!(c[1].start_index, 5);
    }

    #[test]
    fn joins_with_sen_and_wraps_target() {
        let v = vocab();
        let lang = v.language_id("de").unwrap();
        let (x, y, a, b) = (v.encode("x")[0], v.encode("y")[0], v.encode("a")[0], v.encode("b")[0]);
        let ex = make_training_example(&chunk(&["x", "y"]), &chunk(&["a", "b"]), lang, &v, Mode::Document).unwrap();
        assert_eq!(ex.src_ids, vec![x, SEN, y]);
        assert_eq!(ex.tgt_ids, vec![BOS, a, SEN, b, EOS]);
        assert!(!ex.truncated);
        let ex = make_training_example(&chunk(&["x"]), &chunk(&["a"]), lang, &v, Mode::Sentence).unwrap();
        assert!(!ex.src_ids.contains(&SEN) && !ex.tgt_ids.contains(&SEN));
    }

    #[test]
    fn rejects_mismatched_chunks_and_multi_sentence_sentence_mode() {
        let v = vocab();
        let lang = v.language_id("de").unwrap();
        assert!(matches!(
            make_training_example(&chunk(&["x", "y"]), &chunk(&["a"]), lang, &v, Mode::Document),
            Err(Error::Alignment(_))
        ));
        assert!(make_training_example(&chunk(&["x", "y"]), &chunk(&["a", "b"]), lang, &v, Mode::Sentence).is_err());
    }

    #[test]
    fn truncates_long_documents() {
        let v = vocab();
        let lang = v.language_id("de").unwrap();
        let long: Vec<String> = (0..100).map(|_| "x y a b c x".to_string()).collect();
        let src = Chunk { sentences: long.clone(), doc_index: 0, start_index: 0 };
        let full = encode_sentences(&v, &long);
        assert!(full.len() >= 600, "{}", full.len());
        let src600 = Chunk { sentences: long[..].to_vec(), ..src.clone() };
        let ex = make_training_example(&src600, &src, lang, &v, Mode::Document).unwrap();
        assert_eq!(ex.src_ids.len(), 512);
        assert_eq!(ex.src_ids[..], full[..512]);
        assert!(ex.truncated);
    }

    #[test]
    fn split_examples() {
        let v = vocab();
        let (x, y) = (v.encode("x")[0], v.encode("y")[0]);
        let r = split_translation(&[BOS, x, SEN, y, EOS], &v).unwrap();
        assert_eq!(r.sentences, vec!["x", "y"]);
        assert_eq!(r.dropped_empty, 0);
        let r = split_translation(&[x, y], &v).unwrap();
        assert_eq!(r.sentences, vec!["x y"]);
        let r = split_translation(&[x, SEN, SEN, y], &v).unwrap();
        assert_eq!(r.sentences, vec!["x", "y"]);
        assert_eq!(r.dropped_empty, 1);
    }

    proptest! {
        #[test]
        fn reassembly_is_exact(n in 1usize..40, d in 1usize..=8) {
            let document = doc(n);
            let chunks = chunk_document(&document, d).unwrap();
            prop_assert_eq!(chunks.len(), n.div_ceil(d));
            prop_assert!(chunks.iter().rev().skip(1).all(|c| c.k() == d));
            prop_assert_eq!(reassemble(&chunks), document);
        }

        #[test]
        fn sen_count_is_k_minus_one(k in 1usize..6) {
            let v = vocab();
            let lang = v.language_id("de").unwrap();
            let s: Vec<&str> = (0..k).map(|i| if i % 2 == 0 { "x y" } else { "a" }).collect();
            let ex = make_training_example(&chunk(&s), &chunk(&s), lang, &v, Mode::Document).unwrap();
            prop_assert_eq!(ex.src_ids.iter().filter(|&&t| t == SEN).count(), k - 1);
            prop_assert_eq!(ex.tgt_ids.iter().filter(|&&t| t == SEN).count(), k - 1);
        }
    }
}
