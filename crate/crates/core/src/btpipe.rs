//! Pseudo parallel documents from target-side monolingual documents.
//!
//! A bilingual sentence-level model is trained in the reverse direction with
//! half the vocabulary and half the training steps, then used to synthesize a
//! source side sentence by sentence. The target side stays the genuine
//! document, so document structure is preserved by construction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{write_doc_corpus, DocumentCorpus, LanguagePair, ParallelDocCorpus};
use crate::decode::{sen_infer, BeamConfig, InferMode, NeuralTranslator};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::runner::pipeline::{model_config, sentence_pool, PipelineConfig};
use crate::sampler::build_schedule;
use crate::tokenizer::{train_bpe, Vocabulary};
use crate::trainer::{pretrain_sennmt, TrainRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BTConfig {
    pub vocab_divisor: usize,
    pub step_divisor: u64,
    /// Decoding settings for synthesis; the mode is always sentence level.
    pub beam: BeamConfig,
    /// Teacher sentence data is replaced, never mixed, with pseudo documents.
    pub replace_all: bool,
}

impl Default for BTConfig {
    fn default() -> Self {
        Self {
            vocab_divisor: 2,
            step_divisor: 2,
            beam: BeamConfig { mode: InferMode::Sen, ..BeamConfig::default() },
            replace_all: true,
        }
    }
}

impl BTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_divisor == 0 || self.step_divisor == 0 {
            return Err(Error::Config("back-translation divisors must be at least 1".into()));
        }
        if !self.replace_all {
            return Err(Error::Config("only the replace-all policy is supported".into()));
        }
        self.beam.validate()
    }
}

/// Recorded settings of a reverse model, next to the main settings they derive from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReverseManifest {
    /// Direction the reverse model translates (main target → main source).
    pub pair: LanguagePair,
    pub main_vocab_size: usize,
    pub vocab_size: usize,
    pub actual_vocab_size: usize,
    pub main_steps: u64,
    pub steps: u64,
}

pub struct ReverseModel {
    pub manifest: ReverseManifest,
    pub vocab: Vocabulary,
    pub run: TrainRun,
    pub params: ModelParams<f32>,
}

/// Trains the bilingual target→source sentence model for `pair`.
pub fn train_reverse_bilingual(
    pair: &LanguagePair,
    corpus: &ParallelDocCorpus,
    main: &PipelineConfig,
    bt: &BTConfig,
) -> Result<ReverseModel> {
    bt.validate()?;
    if &corpus.pair != pair {
        return Err(Error::Config(format!("corpus is for {}, expected {pair}", corpus.pair)));
    }
    if corpus.num_sents() == 0 {
        return Err(Error::InvalidCorpus(format!("no training sentences for {pair}")));
    }
    let reverse = ParallelDocCorpus::new(pair.reversed(), corpus.tgt.clone(), corpus.src.clone())?;
    let vocab_size = main.vocab_size / bt.vocab_divisor;
    let vocab = train_bpe(&[&reverse.src, &reverse.tgt], vocab_size, std::slice::from_ref(&reverse.pair.tgt))?;
    let steps = (main.pretrain.steps / bt.step_divisor).max(1);
    let train = crate::trainer::TrainConfig { steps, ..main.pretrain.clone() };
    let pool = sentence_pool(&reverse, &vocab, main.limits)?;
    let mut schedule = build_schedule(Vec::new(), vec![pool], 0.0, train.seed)?;
    let run = pretrain_sennmt(&model_config(&vocab, &main.preset)?, &mut schedule, &train)?;
    let params = run.averaged(main.average_last)?;
    Ok(ReverseModel {
        manifest: ReverseManifest {
            pair: reverse.pair,
            main_vocab_size: main.vocab_size,
            vocab_size,
            actual_vocab_size: vocab.size(),
            main_steps: main.pretrain.steps,
            steps,
        },
        vocab,
        run,
        params,
    })
}

/// Pseudo pairs: synthesized sources, genuine target documents.
pub fn back_translate_docs(reverse: &ReverseModel, mono: &DocumentCorpus, bt: &BTConfig) -> Result<ParallelDocCorpus> {
    let main_pair = reverse.manifest.pair.reversed();
    if mono.language != main_pair.tgt {
        return Err(Error::UnknownLanguage(format!(
            "monolingual corpus is `{}`, reverse model reads `{}`",
            mono.language, main_pair.tgt
        )));
    }
    let lang = reverse.params.config.language_index(&main_pair.src)?;
    let model = NeuralTranslator { params: &reverse.params, lang };
    let beam = BeamConfig { mode: InferMode::Sen, ..bt.beam.clone() };
    let unk = reverse.vocab.token(crate::tokenizer::UNK).unwrap_or("[UNK]").to_string();
    let mut docs = Vec::with_capacity(mono.docs.len());
    for doc in &mono.docs {
        let t = sen_infer(&model, &reverse.vocab, doc, &beam)?;
        // a sentence that decodes to nothing keeps its slot as the unknown token
        let mut out = t.sentences.into_iter();
        let synthesized: Vec<String> = (0..doc.len())
            .map(|_| out.next().filter(|s| !s.is_empty()).unwrap_or_else(|| unk.clone()))
            .collect();
        docs.push(synthesized);
    }
    ParallelDocCorpus::new(main_pair.clone(), DocumentCorpus::new(main_pair.src.clone(), docs)?, mono.clone())
}

/// Finetuning inputs for one teacher language pair.
#[derive(Clone, Debug)]
pub struct TeacherInput {
    pub pair: LanguagePair,
    pub documents: Option<ParallelDocCorpus>,
    pub sentences: Option<ParallelDocCorpus>,
}

#[derive(Clone, Debug, Default)]
pub struct ScheduleInputs {
    pub teachers: Vec<TeacherInput>,
    pub students: Vec<ParallelDocCorpus>,
}

/// Replaces the teacher's sentence data by the pseudo documents.
pub fn apply_replacement(teacher: &LanguagePair, inputs: &mut ScheduleInputs, pseudo: ParallelDocCorpus) -> Result<()> {
    let t = inputs
        .teachers
        .iter_mut()
        .find(|t| &t.pair == teacher)
        .ok_or_else(|| Error::UnknownLanguage(format!("teacher {teacher}")))?;
    if t.sentences.is_none() {
        return Err(Error::Config(format!("teacher {teacher} has no sentence data to replace")));
    }
    if pseudo.pair != *teacher {
        return Err(Error::Config(format!("pseudo corpus is for {}, teacher is {teacher}", pseudo.pair)));
    }
    t.sentences = None;
    t.documents = Some(pseudo);
    Ok(())
}

/// Writes `bt/<src>-<tgt>.{src,tgt}` under `root` plus a JSON provenance sidecar.
pub fn write_pseudo(root: &Path, pseudo: &ParallelDocCorpus, manifest: &ReverseManifest) -> Result<[PathBuf; 3]> {
    let dir = root.join("bt");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = pseudo.pair.to_string();
    let src = dir.join(format!("{stem}.{}", pseudo.pair.src));
    let tgt = dir.join(format!("{stem}.{}", pseudo.pair.tgt));
    let prov = dir.join(format!("{stem}.provenance.json"));
    write_doc_corpus(&pseudo.src, &src)?;
    write_doc_corpus(&pseudo.tgt, &tgt)?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&prov, text + "\n").map_err(|e| Error::io(&prov, e))?;
    Ok([src, tgt, prov])
}
