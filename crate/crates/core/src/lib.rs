//! Multilingual document-level neural machine translation toolkit.
//!
//! The crate covers the whole pipeline for studying zero-shot transfer of
//! document-level translation from *teacher* languages (trained with parallel
//! documents) to *student* languages (trained with parallel sentences only):
//!
//! - [`corpus`]: blank-line separated document corpora and alignment checks.
//! - [`tokenizer`]: byte-pair-encoding vocabulary with reserved specials.
//! - [`d2d`]: D-sentence concatenation with the `[SEN]` boundary symbol.
//! - [`sampler`]: teacher/student mixing governed by the document proportion `p`.
//! - [`model`]: compact pre-norm encoder-decoder transformer with exact gradients
//!   and a source-side language embedding.
//! - [`trainer`]: two-stage training (sentence pretraining, document finetuning),
//!   Adam with inverse-square-root warmup, checkpoint averaging.
//! - [`decode`]: beam search with length penalty, sentence- and document-level
//!   inference with end-of-sequence suppression.
//! - [`btpipe`]: back-translated pseudo documents.
//! - [`metrics`]: corpus BLEU, document BLEU, gendered pronoun F1, contrastive accuracy.
//! - [`runner`]: N21/12N sweeps, aggregation and reports, synthetic corpora.

pub mod btpipe;
pub mod checkpoint;
pub mod corpus;
pub mod d2d;
pub mod decode;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
