//! Subcommand implementations. Every command writes under the run directory
//! `runs/<hash12>-s<seed>` of the resolved manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use docnmt::btpipe::{back_translate_docs, train_reverse_bilingual, write_pseudo};
use docnmt::checkpoint::{Checkpoint, Stage};
use docnmt::corpus::{
    corpus_stats, read_doc_corpus, read_parallel, write_doc_corpus, DocumentCorpus, LanguagePair, ParallelDocCorpus,
};
use docnmt::d2d::{make_examples, Mode};
use docnmt::decode::{diagnostics_tsv, BeamConfig, InferMode};
use docnmt::metrics::{
    bleu_stats, contrastive_accuracy, document_segments, pronoun_f1, read_contrastive, reports_tsv, write_contrastive,
    EvalReport,
};
use docnmt::model::ModelParams;
use docnmt::runner::{
    finetune, group_by_resource, pretrain, run_sweep, translate_corpus, DataCondition, DirectionMetrics,
    ExperimentGrid, PairData, Registry,
};
use docnmt::synthetic::{Direction, SyntheticConfig, World};
use docnmt::tokenizer::{train_bpe, Vocabulary};
use docnmt::trainer::{log_to_tsv, TrainRun};
use docnmt::Error;
use sha2::{Digest, Sha256};

use crate::manifest::{self, Resolved};
use crate::SynthArgs;

#[derive(Args)]
pub struct TranslateArgs {
    /// Language pair whose target language is produced.
    #[arg(long)]
    pub pair: LanguagePair,
    /// Source document corpus, relative to the workdir.
    #[arg(long)]
    pub input: PathBuf,
    /// Output corpus path; defaults to the run's `translations/` directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// `sen` or `doc`; defaults to the manifest's decode mode.
    #[arg(long)]
    pub mode: Option<InferMode>,
    #[arg(long, default_value = "finetune")]
    pub model: Stage,
}

#[derive(Args)]
pub struct PairsArgs {
    /// Pairs to process; defaults to the schedule's teachers.
    #[arg(long, value_delimiter = ',')]
    pub pairs: Vec<LanguagePair>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Hypothesis document corpus, relative to the workdir.
    #[arg(long)]
    pub hyp: PathBuf,
    /// Reference document corpus, relative to the workdir.
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Args)]
pub struct ContrastiveArgs {
    #[arg(long)]
    pub pair: LanguagePair,
    #[arg(long, default_value = "finetune")]
    pub model: Stage,
    /// Context sentences; defaults to the manifest's metrics context.
    #[arg(long)]
    pub context: Option<usize>,
}

pub fn synth(workdir: &Path, args: &SynthArgs) -> Result<()> {
    let n = args.languages.len();
    let train_docs = match args.train_docs.as_slice() {
        [one] => vec![*one; n],
        many if many.len() == n => many.to_vec(),
        _ => bail!(Error::Config(format!("--train-docs needs 1 or {n} values"))),
    };
    let config = SyntheticConfig {
        languages: args.languages.clone(),
        train_docs,
        test_docs: args.test_docs,
        mono_docs: args.mono_docs,
        contrastive_items: args.items,
        direction: if args.many_to_one { Direction::ManyToOne } else { Direction::OneToMany },
        ..SyntheticConfig::three_languages(args.synth_seed)
    };
    let out = workdir.join(&args.out);
    for p in World::new(config)?.generate()? {
        let dir = out.join(p.pair.to_string());
        write_doc_corpus(&p.train.src, dir.join(format!("train.{}", p.pair.src)))?;
        write_doc_corpus(&p.train.tgt, dir.join(format!("train.{}", p.pair.tgt)))?;
        write_doc_corpus(&p.test.src, dir.join(format!("test.{}", p.pair.src)))?;
        write_doc_corpus(&p.test.tgt, dir.join(format!("test.{}", p.pair.tgt)))?;
        write_doc_corpus(&p.mono, dir.join(format!("mono.{}", p.pair.tgt)))?;
        write_contrastive(&p.contrastive, dir.join("contrastive.jsonl"))?;
        println!("{}\t{}", p.pair, dir.display());
    }
    Ok(())
}

pub struct Ctx {
    workdir: PathBuf,
    manifest: Resolved,
    run: PathBuf,
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    }
}

fn mode_name(mode: InferMode) -> &'static str {
    match mode {
        InferMode::Sen => "sen",
        InferMode::Doc => "doc",
    }
}

impl Ctx {
    pub fn load(workdir: &Path, manifest_path: &Path, overrides: &[String]) -> Result<Self> {
        let manifest = manifest::load(manifest_path, overrides)?;
        let run = workdir.join(manifest.run_dir_name());
        Ok(Self { workdir: workdir.to_path_buf(), manifest, run })
    }

    fn pair_dir(&self, pair: &LanguagePair) -> PathBuf {
        self.workdir.join(&self.manifest.corpora_dir).join(pair.to_string())
    }

    /// Every input file of a pair that exists, in a fixed order.
    fn input_files(&self, pair: &LanguagePair) -> Vec<PathBuf> {
        let dir = self.pair_dir(pair);
        [
            format!("train.{}", pair.src),
            format!("train.{}", pair.tgt),
            format!("test.{}", pair.src),
            format!("test.{}", pair.tgt),
            format!("mono.{}", pair.tgt),
            "contrastive.jsonl".to_string(),
        ]
        .into_iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect()
    }

    fn load_pair(&self, pair: &LanguagePair) -> Result<PairData> {
        let dir = self.pair_dir(pair);
        let split = |name: &str| -> Result<ParallelDocCorpus> {
            let src = dir.join(format!("{name}.{}", pair.src));
            let tgt = dir.join(format!("{name}.{}", pair.tgt));
            for f in [&src, &tgt] {
                if !f.exists() {
                    bail!(Error::Missing(format!("corpus file {}", f.display())));
                }
            }
            read_parallel(&src, &tgt, pair).with_context(|| format!("{name} split of {pair}"))
        };
        let mono_path = dir.join(format!("mono.{}", pair.tgt));
        let items_path = dir.join("contrastive.jsonl");
        Ok(PairData {
            pair: pair.clone(),
            train: split("train")?,
            test: split("test")?,
            contrastive: if items_path.exists() { read_contrastive(&items_path)? } else { Vec::new() },
            mono: if mono_path.exists() { Some(read_doc_corpus(&mono_path, &pair.tgt)?) } else { None },
        })
    }

    fn registry(&self) -> Result<Registry> {
        Ok(Registry { pairs: self.manifest.pairs.iter().map(|p| self.load_pair(p)).collect::<Result<_>>()? })
    }

    fn vocab(&self) -> Result<Vocabulary> {
        let path = self.run.join("prepared/vocab.txt");
        if !path.exists() {
            bail!(Error::Missing(format!("{} (run `docnmt prepare` first)", path.display())));
        }
        Ok(Vocabulary::load(&path)?)
    }

    fn model(&self, stage: Stage) -> Result<ModelParams<f32>> {
        let path = self.run.join(stage_name(stage)).join("averaged.bin");
        if !path.exists() {
            let cmd = if stage == Stage::Pretrain { "train" } else { "finetune" };
            bail!(Error::Missing(format!("{} (run `docnmt {cmd}` first)", path.display())));
        }
        Ok(Checkpoint::load(&path)?.params)
    }

    /// `manifest.json` holds exactly the hashed bytes; `manifest.sha256` the hash.
    fn record_manifest(&self) -> Result<()> {
        for (name, text) in [("manifest.json", self.manifest.to_json()), ("manifest.sha256", self.manifest.hash() + "\n")] {
            let path = self.run.join(name);
            if fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
                write(&path, text)?;
            }
        }
        Ok(())
    }

    fn inputs_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.manifest.hash());
        for pair in &self.manifest.pairs {
            for f in self.input_files(pair) {
                h.update(f.file_name().unwrap_or_default().to_string_lossy().as_bytes());
                h.update(fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn prepare(&self) -> Result<()> {
        let stamp = self.run.join("prepared/inputs.sha256");
        let hash = self.inputs_hash()?;
        if fs::read_to_string(&stamp).ok().map(|s| s.trim().to_string()) == Some(hash.clone()) {
            println!("up to date: {}", self.run.display());
            return Ok(());
        }
        let registry = self.registry()?;
        let cfg = &self.manifest.pipeline;
        let corpora: Vec<&DocumentCorpus> = registry.pairs.iter().flat_map(|p| [&p.train.src, &p.train.tgt]).collect();
        let vocab = train_bpe(&corpora, cfg.vocab_size, &registry.languages())?;
        self.record_manifest()?;
        let prepared = self.run.join("prepared");
        fs::create_dir_all(&prepared)?;
        vocab.save(prepared.join("vocab.txt"))?;
        let mut chunks = String::from("pair\tmode\texamples\ttruncated\n");
        for p in &registry.pairs {
            for side in [&p.train.src, &p.train.tgt] {
                let name = format!("stats/{}.train.{}.tsv", p.pair, side.language);
                write(&prepared.join(name), corpus_stats(side).to_tsv())?;
            }
            let lang = vocab.language_id(&p.pair.tgt)?;
            for (mode, d) in [(Mode::Sentence, 1), (Mode::Document, cfg.d)] {
                let ex = make_examples(&p.train.src, &p.train.tgt, d, lang, &vocab, mode, cfg.limits)?;
                let truncated = ex.iter().filter(|e| e.truncated).count();
                let m = if mode == Mode::Sentence { "sentence" } else { "document" };
                chunks.push_str(&format!("{}\t{m}\t{}\t{truncated}\n", p.pair, ex.len()));
            }
        }
        write(&prepared.join("chunks.tsv"), chunks)?;
        write(&stamp, format!("{hash}\n"))?;
        println!("prepared {} (vocabulary {})", self.run.display(), vocab.size());
        Ok(())
    }

    fn save_run(&self, stage: Stage, run: &TrainRun) -> Result<()> {
        let dir = self.run.join(stage_name(stage));
        fs::create_dir_all(&dir)?;
        for c in &run.checkpoints {
            c.save(&dir.join(format!("ckpt-{}.bin", c.step)))?;
        }
        write(&dir.join("log.tsv"), log_to_tsv(&run.log))?;
        let averaged = Checkpoint {
            stage,
            params: run.averaged(self.manifest.pipeline.average_last)?,
            optimizer: None,
            step: run.final_checkpoint().step,
        };
        averaged.save(&dir.join("averaged.bin"))?;
        println!("{} -> {}", stage_name(stage), dir.display());
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let registry = self.registry()?;
        self.record_manifest()?;
        let run = pretrain(&registry, &vocab, &self.manifest.pipeline)?;
        self.save_run(Stage::Pretrain, &run)
    }

    fn last_pretrain_checkpoint(&self) -> Result<Checkpoint> {
        let dir = self.run.join("pretrain");
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(&dir).map_err(|_| Error::Missing(format!("{} (run `docnmt train` first)", dir.display())))? {
            let path = entry?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("ckpt-")?.strip_suffix(".bin")?.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().is_none_or(|(s, _)| step > *s) {
                    best = Some((step, path));
                }
            }
        }
        let (_, path) = best.ok_or_else(|| Error::Missing(format!("pretraining checkpoint in {}", dir.display())))?;
        Ok(Checkpoint::load(&path)?)
    }

    fn pseudo_corpus(&self, pair: &LanguagePair) -> Result<ParallelDocCorpus> {
        let dir = self.run.join("bt");
        let src = dir.join(format!("{pair}.{}", pair.src));
        let tgt = dir.join(format!("{pair}.{}", pair.tgt));
        if !src.exists() || !tgt.exists() {
            bail!(Error::Missing(format!("{} (run `docnmt backtranslate` first)", src.display())));
        }
        Ok(read_parallel(src, tgt, pair)?)
    }

    pub fn finetune(&self) -> Result<()> {
        let Some(schedule) = &self.manifest.schedule else {
            bail!(manifest::ManifestError("finetuning needs a [schedule] section with roles".into()));
        };
        let vocab = self.vocab()?;
        let pre = TrainRun { checkpoints: vec![self.last_pretrain_checkpoint()?], log: Vec::new(), losses: Vec::new() };
        let mut teachers = Vec::new();
        for t in &schedule.teachers {
            teachers.push(match schedule.condition {
                DataCondition::Genuine => self.load_pair(t)?.train,
                DataCondition::Bt => self.pseudo_corpus(t)?,
            });
        }
        let students: Vec<ParallelDocCorpus> =
            schedule.students.iter().map(|s| self.load_pair(s).map(|d| d.train)).collect::<Result<_>>()?;
        self.record_manifest()?;
        let run = finetune(
            &pre,
            &vocab,
            &teachers.iter().collect::<Vec<_>>(),
            &students.iter().collect::<Vec<_>>(),
            schedule.p,
            self.manifest.seed,
            &self.manifest.pipeline,
        )?;
        self.save_run(Stage::Finetune, &run)
    }

    pub fn translate(&self, args: &TranslateArgs) -> Result<()> {
        let vocab = self.vocab()?;
        let params = self.model(args.model)?;
        let input = read_doc_corpus(self.workdir.join(&args.input), &args.pair.src)?;
        let mode = args.mode.unwrap_or(self.manifest.pipeline.beam.mode);
        let beam = BeamConfig { mode, ..self.manifest.pipeline.beam.clone() };
        let out = translate_corpus(&params, &vocab, &input.docs, &args.pair.tgt, &beam)?;
        let docs: Vec<Vec<String>> = out.iter().map(|t| t.sentences.clone()).collect();
        let path = match &args.output {
            Some(p) => self.workdir.join(p),
            None => self.run.join("translations").join(format!(
                "{}.{}.{}.{}",
                stage_name(args.model),
                args.pair,
                mode_name(mode),
                args.pair.tgt
            )),
        };
        write(&path, docnmt::corpus::render_doc_corpus(&DocumentCorpus { language: args.pair.tgt.clone(), docs }))?;
        let diags: Vec<_> = out.iter().map(|t| t.diagnostics.clone()).collect();
        write(&path.with_extension(format!("{}.diag.tsv", args.pair.tgt)), diagnostics_tsv(&diags))?;
        let preserved = diags.iter().filter(|d| d.count_preserved()).count();
        println!("{}\t{preserved}/{} documents count-preserved", path.display(), diags.len());
        Ok(())
    }

    pub fn backtranslate(&self, args: &PairsArgs) -> Result<()> {
        let pairs = if args.pairs.is_empty() {
            self.manifest.schedule.as_ref().map(|s| s.teachers.clone()).unwrap_or_default()
        } else {
            args.pairs.clone()
        };
        if pairs.is_empty() {
            bail!(manifest::ManifestError("no pairs given and the schedule names no teachers".into()));
        }
        self.record_manifest()?;
        for pair in &pairs {
            let data = self.load_pair(pair)?;
            let mono = data
                .mono
                .as_ref()
                .ok_or_else(|| Error::Missing(format!("{}/mono.{}", self.pair_dir(pair).display(), pair.tgt)))?;
            let reverse = train_reverse_bilingual(pair, &data.train, &self.manifest.pipeline, &self.manifest.bt)?;
            let pseudo = back_translate_docs(&reverse, mono, &self.manifest.bt)?;
            let files = write_pseudo(&self.run, &pseudo, &reverse.manifest)?;
            println!("{pair}\t{}", files[0].display());
        }
        Ok(())
    }

    pub fn evaluate(&self, args: &EvaluateArgs) -> Result<()> {
        let hyp = read_doc_corpus(self.workdir.join(&args.hyp), "hyp")?;
        let refs = read_doc_corpus(self.workdir.join(&args.reference), "ref")?;
        docnmt::corpus::check_alignment(&hyp, &refs).context("hypothesis and reference documents differ in shape")?;
        let hs: Vec<&str> = hyp.sentences().collect();
        let rs: Vec<&str> = refs.sentences().collect();
        let doc = EvalReport::bleu("doc_bleu", &bleu_stats(&document_segments(&hyp.docs), &document_segments(&refs.docs))?);
        let reports = [EvalReport::bleu("bleu", &bleu_stats(&hs, &rs)?), doc, EvalReport::pronoun(&pronoun_f1(&hs, &rs)?)];
        let text = reports_tsv(&reports);
        let name = args.hyp.file_name().unwrap_or_default().to_string_lossy().to_string();
        write(&self.run.join("eval").join(format!("{name}.tsv")), &text)?;
        print!("{text}");
        Ok(())
    }

    pub fn contrastive(&self, args: &ContrastiveArgs) -> Result<()> {
        let vocab = self.vocab()?;
        let params = self.model(args.model)?;
        let items_path = self.pair_dir(&args.pair).join("contrastive.jsonl");
        if !items_path.exists() {
            bail!(Error::Missing(format!("contrastive set {}", items_path.display())));
        }
        let items = read_contrastive(&items_path)?;
        let context = args.context.unwrap_or(self.manifest.contrastive_context);
        let lang = params.config.language_index(&args.pair.tgt)?;
        let report = contrastive_accuracy(&params, &vocab, &items, context, lang)?;
        let text = reports_tsv(&[EvalReport::contrastive(&report)]);
        let name = format!("{}.{}.c{context}.tsv", stage_name(args.model), args.pair);
        write(&self.run.join("contrastive").join(name), &text)?;
        print!("{text}");
        Ok(())
    }

    pub fn sweep(&self) -> Result<()> {
        let Some(r) = &self.manifest.runner else {
            bail!(manifest::ManifestError("sweeping needs a [runner] section".into()));
        };
        let grid = ExperimentGrid {
            pairs: self.manifest.pairs.clone(),
            modes: r.modes.clone(),
            p_values: r.p_values.clone(),
            condition: r.condition,
            seeds: r.seeds.clone(),
            pipeline: self.manifest.pipeline.clone(),
            bt: self.manifest.bt.clone(),
        };
        let registry = self.registry()?;
        self.record_manifest()?;
        let report = run_sweep(&grid, &registry)?;
        let dir = self.run.join("sweep");
        report.write(&dir)?;
        if let Some(threshold) = r.resource_threshold {
            let mut text = String::from("mode\tp\tinfer\tgroup\tmetric\tmean\tn\n");
            let mut keys: Vec<_> = report.rows.iter().map(|x| (x.mode, x.p.to_bits(), x.infer)).collect();
            keys.dedup();
            for (mode, p, infer) in keys {
                let rows: Vec<_> =
                    report.rows.iter().filter(|x| (x.mode, x.p.to_bits(), x.infer) == (mode, p, infer)).cloned().collect();
                for metric in DirectionMetrics::NAMES {
                    for g in group_by_resource(&rows, metric, threshold)? {
                        let mode = mode.map_or_else(|| "baseline".into(), |m| m.to_string());
                        let mean = g.mean.map_or_else(|| "absent".into(), |m| format!("{m:.6}"));
                        text.push_str(&format!(
                            "{mode}\t{:.2}\t{}\t{}\t{metric}\t{mean}\t{}\n",
                            f64::from_bits(p),
                            mode_name(infer),
                            g.group,
                            g.n
                        ));
                    }
                }
            }
            write(&dir.join("groups.tsv"), text)?;
        }
        println!("sweep -> {}", dir.display());
        Ok(())
    }
}
