//! Document-structured corpora.
//!
//! On disk a corpus is UTF-8 text with one sentence per line and blank lines
//! between documents. Sentences are trimmed on read; runs of blank lines
//! collapse into a single document boundary. Writing emits LF line endings,
//! exactly one blank line between documents and a trailing newline, so
//! `read(write(c)) == c` for every valid corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Document = Vec<String>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LanguagePair {
    pub src: String,
    pub tgt: String,
}

impl LanguagePair {
    pub fn new(src: impl Into<String>, tgt: impl Into<String>) -> Self {
        Self {
            src: src.into(),
            tgt: tgt.into(),
        }
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.tgt.clone(), self.src.clone())
    }
}

impl fmt::Display for LanguagePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for LanguagePair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('-') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains('-') => {
                Ok(Self::new(a, b))
            }
            _ => Err(Error::Config(format!(
                "language pair `{s}` is not of the form src-tgt"
            ))),
        }
    }
}

/// Ordered documents of one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentCorpus {
    pub language: String,
    pub docs: Vec<Document>,
}

impl DocumentCorpus {
    pub fn new(language: impl Into<String>, docs: Vec<Document>) -> Result<Self> {
        let corpus = Self {
            language: language.into(),
            docs,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn empty(language: impl Into<String>) -> Self {
        Self {
            language: language.into(),
            docs: Vec::new(),
        }
    }

    /// Every document is non-empty and every sentence is non-empty, already
    /// trimmed and free of line breaks.
    pub fn validate(&self) -> Result<()> {
        for (d, doc) in self.docs.iter().enumerate() {
            if doc.is_empty() {
                return Err(Error::InvalidCorpus(format!("document {d} has no sentences")));
            }
            for (s, sent) in doc.iter().enumerate() {
                if sent.trim().is_empty() {
                    return Err(Error::InvalidCorpus(format!(
                        "document {d}, sentence {s} is empty"
                    )));
                }
                if sent.trim() != sent {
                    return Err(Error::InvalidCorpus(format!(
                        "document {d}, sentence {s} has surrounding whitespace"
                    )));
                }
                if sent.contains('\n') {
                    return Err(Error::InvalidCorpus(format!(
                        "document {d}, sentence {s} contains a line break"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_sents(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().flatten().map(String::as_str)
    }
}

/// Sentence-aligned parallel documents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelDocCorpus {
    pub pair: LanguagePair,
    pub src: DocumentCorpus,
    pub tgt: DocumentCorpus,
}

impl ParallelDocCorpus {
    pub fn new(pair: LanguagePair, src: DocumentCorpus, tgt: DocumentCorpus) -> Result<Self> {
        check_alignment(&src, &tgt)?;
        Ok(Self { pair, src, tgt })
    }

    pub fn num_sents(&self) -> usize {
        self.src.num_sents()
    }

    /// Aligned `(source, target)` documents.
    pub fn doc_pairs(&self) -> impl Iterator<Item = (&Document, &Document)> {
        self.src.docs.iter().zip(&self.tgt.docs)
    }

    /// Every sentence pair, in corpus order.
    pub fn sentence_pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.doc_pairs()
            .flat_map(|(s, t)| s.iter().zip(t).map(|(a, b)| (a.as_str(), b.as_str())))
    }
}

pub fn check_alignment(src: &DocumentCorpus, tgt: &DocumentCorpus) -> Result<()> {
    if src.docs.len() != tgt.docs.len() {
        return Err(Error::DocumentCount {
            src: src.docs.len(),
            tgt: tgt.docs.len(),
        });
    }
    for (doc, (s, t)) in src.docs.iter().zip(&tgt.docs).enumerate() {
        if s.len() != t.len() {
            return Err(Error::SentenceCount {
                doc,
                src: s.len(),
                tgt: t.len(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub num_sents: usize,
    /// whitespace tokens per sentence -> number of sentences
    pub tokens_per_sentence: BTreeMap<usize, usize>,
    /// sentences per document -> number of documents
    pub sentences_per_document: BTreeMap<usize, usize>,
}

impl CorpusStats {
    /// Tab-separated rendering: a summary block followed by both histograms.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("num_docs\t{}\nnum_sents\t{}\n", self.num_docs, self.num_sents);
        for (k, v) in &self.sentences_per_document {
            out.push_str(&format!("sents_per_doc\t{k}\t{v}\n"));
        }
        for (k, v) in &self.tokens_per_sentence {
            out.push_str(&format!("tokens_per_sent\t{k}\t{v}\n"));
        }
        out
    }
}

pub fn corpus_stats(corpus: &DocumentCorpus) -> CorpusStats {
    let mut stats = CorpusStats {
        num_docs: corpus.docs.len(),
        ..CorpusStats::default()
    };
    for doc in &corpus.docs {
        stats.num_sents += doc.len();
        *stats.sentences_per_document.entry(doc.len()).or_default() += 1;
        for sent in doc {
            *stats
                .tokens_per_sentence
                .entry(sent.split_whitespace().count())
                .or_default() += 1;
        }
    }
    stats
}

/// Parses corpus text. Never produces an empty document or sentence.
pub fn parse_doc_corpus(text: &str, language: &str) -> DocumentCorpus {
    let mut docs = Vec::new();
    let mut current: Document = Vec::new();
    for line in text.split('\n') {
        let sent = line.trim();
        if sent.is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(sent.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    DocumentCorpus {
        language: language.to_string(),
        docs,
    }
}

pub fn read_doc_corpus(path: impl AsRef<Path>, language: &str) -> Result<DocumentCorpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Encoding {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
    })?;
    Ok(parse_doc_corpus(text, language))
}

/// Canonical byte rendering of a corpus.
pub fn render_doc_corpus(corpus: &DocumentCorpus) -> String {
    let mut out = String::new();
    for (i, doc) in corpus.docs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for sent in doc {
            out.push_str(sent);
            out.push('\n');
        }
    }
    out
}

pub fn write_doc_corpus(corpus: &DocumentCorpus, path: impl AsRef<Path>) -> Result<()> {
    corpus.validate()?;
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, render_doc_corpus(corpus)).map_err(|e| Error::io(path, e))
}

pub fn read_parallel(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    pair: &LanguagePair,
) -> Result<ParallelDocCorpus> {
    let src = read_doc_corpus(src_path, &pair.src)?;
    let tgt = read_doc_corpus(tgt_path, &pair.tgt)?;
    ParallelDocCorpus::new(pair.clone(), src, tgt)
}
