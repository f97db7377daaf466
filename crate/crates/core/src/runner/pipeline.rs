//! Data preparation, training and evaluation steps shared by sweeps, the
//! command line and tests.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::corpus::{Document, DocumentCorpus, LanguagePair, ParallelDocCorpus};
use crate::d2d::{make_examples, Limits, Mode};
use crate::decode::{translate_document, BeamConfig, InferMode, NeuralTranslator};
use crate::error::{Error, Result};
use crate::metrics::{bleu_stats, contrastive_accuracy, doc_bleu, pronoun_f1, ContrastiveItem};
use crate::model::{ModelConfig, ModelParams};
use crate::sampler::{build_schedule, Pool};
use crate::tokenizer::{train_bpe, Vocabulary};
use crate::trainer::{finetune_docnmt, pretrain_sennmt, TrainConfig, TrainRun};

/// Everything known about one translation direction.
#[derive(Clone, Debug)]
pub struct PairData {
    pub pair: LanguagePair,
    pub train: ParallelDocCorpus,
    pub test: ParallelDocCorpus,
    pub contrastive: Vec<ContrastiveItem>,
    /// Target-language monolingual documents.
    pub mono: Option<DocumentCorpus>,
}

impl From<crate::synthetic::SyntheticPair> for PairData {
    fn from(p: crate::synthetic::SyntheticPair) -> Self {
        Self { pair: p.pair, train: p.train, test: p.test, contrastive: p.contrastive, mono: Some(p.mono) }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    pub pairs: Vec<PairData>,
}

impl Registry {
    pub fn get(&self, pair: &LanguagePair) -> Result<&PairData> {
        self.pairs
            .iter()
            .find(|p| &p.pair == pair)
            .ok_or_else(|| Error::Missing(format!("corpus for {pair}")))
    }

    /// All language codes, sorted.
    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self.pairs.iter().flat_map(|p| [p.pair.src.clone(), p.pair.tgt.clone()]).collect();
        langs.sort();
        langs.dedup();
        langs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub vocab_size: usize,
    pub preset: String,
    pub d: usize,
    pub limits: Limits,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub beam: BeamConfig,
    pub average_last: usize,
}

impl PipelineConfig {
    /// Large-scale constants: 32K vocabulary, D=5, 300K + 20K steps.
    pub fn full() -> Self {
        Self {
            vocab_size: 32_000,
            preset: "full".into(),
            d: 5,
            limits: Limits::default(),
            pretrain: TrainConfig::full(Stage::Pretrain),
            finetune: TrainConfig::full(Stage::Finetune),
            beam: BeamConfig::default(),
            average_last: 5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected full, desk or tiny)"))),
        }
    }

    pub fn desk() -> Self {
        Self {
            vocab_size: 400,
            preset: "desk".into(),
            d: 3,
            limits: Limits::default(),
            pretrain: TrainConfig::desk(Stage::Pretrain),
            finetune: TrainConfig::desk(Stage::Finetune),
            beam: BeamConfig { d: 3, ..BeamConfig::default() },
            average_last: 5,
        }
    }

    /// Seconds-scale settings for smoke tests.
    pub fn tiny() -> Self {
        let stage = |stage, steps| TrainConfig { steps, warmup: 10, batch_size: 8, ..TrainConfig::desk(stage) };
        Self {
            vocab_size: 160,
            preset: "tiny".into(),
            pretrain: stage(Stage::Pretrain, 30),
            finetune: stage(Stage::Finetune, 20),
            beam: BeamConfig { beam: 2, d: 3, ..BeamConfig::default() },
            average_last: 2,
            ..Self::desk()
        }
    }
}

/// Joint vocabulary over both sides of every training corpus.
pub fn train_vocab(registry: &Registry, vocab_size: usize) -> Result<Vocabulary> {
    let corpora: Vec<&DocumentCorpus> = registry.pairs.iter().flat_map(|p| [&p.train.src, &p.train.tgt]).collect();
    train_bpe(&corpora, vocab_size, &registry.languages())
}

pub fn model_config(vocab: &Vocabulary, preset: &str) -> Result<ModelConfig> {
    ModelConfig::preset(preset, vocab.size(), vocab.languages().to_vec())
}

/// Sentence-level examples of a parallel corpus.
pub fn sentence_pool(corpus: &ParallelDocCorpus, vocab: &Vocabulary, limits: Limits) -> Result<Pool> {
    let lang = vocab.language_id(&corpus.pair.tgt)?;
    let ex = make_examples(&corpus.src, &corpus.tgt, 1, lang, vocab, Mode::Sentence, limits)?;
    Ok(Pool::new(corpus.pair.clone(), ex))
}

/// `d`-sentence chunk examples of a parallel corpus.
pub fn document_pool(corpus: &ParallelDocCorpus, vocab: &Vocabulary, d: usize, limits: Limits) -> Result<Pool> {
    let lang = vocab.language_id(&corpus.pair.tgt)?;
    let ex = make_examples(&corpus.src, &corpus.tgt, d, lang, vocab, Mode::Document, limits)?;
    Ok(Pool::new(corpus.pair.clone(), ex))
}

/// Multilingual sentence-level pretraining on every pair's training data.
pub fn pretrain(registry: &Registry, vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<TrainRun> {
    let pools = registry
        .pairs
        .iter()
        .map(|p| sentence_pool(&p.train, vocab, cfg.limits))
        .collect::<Result<Vec<_>>>()?;
    let mut schedule = build_schedule(Vec::new(), pools, 0.0, cfg.pretrain.seed)?;
    pretrain_sennmt(&model_config(vocab, &cfg.preset)?, &mut schedule, &cfg.pretrain)
}

/// Finetuning on teacher documents (proportion `p`) and student sentences.
/// `teachers` may carry replacement corpora (e.g. back-translated pseudo documents).
pub fn finetune(
    pretrained: &TrainRun,
    vocab: &Vocabulary,
    teachers: &[&ParallelDocCorpus],
    students: &[&ParallelDocCorpus],
    p: f64,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<TrainRun> {
    let t = teachers
        .iter()
        .map(|c| document_pool(c, vocab, cfg.d, cfg.limits))
        .collect::<Result<Vec<_>>>()?;
    let s = students
        .iter()
        .map(|c| sentence_pool(c, vocab, cfg.limits))
        .collect::<Result<Vec<_>>>()?;
    let mut schedule = build_schedule(t, s, p, seed)?;
    let train = TrainConfig { seed, ..cfg.finetune.clone() };
    finetune_docnmt(pretrained.final_checkpoint(), &model_config(vocab, &cfg.preset)?, &mut schedule, &train)
}

/// Translations of every test document of a corpus.
pub fn translate_corpus(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    docs: &[Document],
    target: &str,
    beam: &BeamConfig,
) -> Result<Vec<crate::decode::Translation>> {
    let lang = params.config.language_index(target)?;
    let model = NeuralTranslator { params, lang };
    docs.iter().map(|d| translate_document(&model, vocab, d, beam)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub bleu: f64,
    pub doc_bleu: f64,
    pub pronoun_f1: f64,
    pub contrastive: Option<f64>,
    /// Fraction of documents whose sentence count was preserved.
    pub count_preserved: f64,
    pub forced_stops: usize,
}

impl DirectionMetrics {
    pub const NAMES: [&'static str; 5] = ["bleu", "doc_bleu", "pronoun_f1", "contrastive", "count_preserved"];

    pub fn values(&self) -> [Option<f64>; 5] {
        [Some(self.bleu), Some(self.doc_bleu), Some(self.pronoun_f1), self.contrastive, Some(self.count_preserved)]
    }
}

/// Sentence-aligned (hypothesis, reference) lists; documents whose sentence
/// count changed contribute their joined text as one segment.
fn sentence_segments(hyps: &[Document], refs: &[Document]) -> (Vec<String>, Vec<String>) {
    let (mut h, mut r) = (Vec::new(), Vec::new());
    for (hd, rd) in hyps.iter().zip(refs) {
        if hd.len() == rd.len() {
            h.extend(hd.iter().cloned());
            r.extend(rd.iter().cloned());
        } else {
            h.push(hd.join(" "));
            r.push(rd.join(" "));
        }
    }
    (h, r)
}

/// Decodes the test split with `mode` and scores it. Contrastive accuracy uses
/// `D - 1` context sentences for DocInfer and none for SenInfer.
pub fn evaluate_direction(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    data: &PairData,
    mode: InferMode,
    cfg: &PipelineConfig,
) -> Result<DirectionMetrics> {
    let beam = BeamConfig { mode, d: cfg.d, ..cfg.beam.clone() };
    let translations = translate_corpus(params, vocab, &data.test.src.docs, &data.pair.tgt, &beam)?;
    let hyps: Vec<Document> = translations.iter().map(|t| t.sentences.clone()).collect();
    let refs = &data.test.tgt.docs;
    let (hs, rs) = sentence_segments(&hyps, refs);
    let bleu = bleu_stats(&hs, &rs)?.score();
    let f1 = pronoun_f1(&hs, &rs)?.f1;
    let contrastive = if data.contrastive.is_empty() {
        None
    } else {
        let d_context = match mode {
            InferMode::Sen => 0,
            InferMode::Doc => (cfg.d - 1).min(data.contrastive.iter().map(|i| i.context.len()).min().unwrap_or(0)),
        };
        let lang = params.config.language_index(&data.pair.tgt)?;
        Some(contrastive_accuracy(params, vocab, &data.contrastive, d_context, lang)?.accuracy)
    };
    let preserved = translations.iter().filter(|t| t.diagnostics.count_preserved()).count();
    Ok(DirectionMetrics {
        bleu,
        doc_bleu: doc_bleu(&hyps, refs)?,
        pronoun_f1: f1,
        contrastive,
        count_preserved: preserved as f64 / translations.len().max(1) as f64,
        forced_stops: translations.iter().map(|t| t.diagnostics.forced_stops).sum(),
    })
}
