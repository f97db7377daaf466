//! Transfer sweeps: configuration enumeration, shared pretraining, evaluation
//! and aggregation into report tables.

pub mod pipeline;

pub use pipeline::{
    document_pool, evaluate_direction, finetune, model_config, pretrain, sentence_pool, train_vocab, translate_corpus,
    DirectionMetrics, PairData, PipelineConfig, Registry,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::btpipe::{back_translate_docs, train_reverse_bilingual, BTConfig, ReverseManifest};
use crate::corpus::{render_doc_corpus, LanguagePair, ParallelDocCorpus};
use crate::decode::InferMode;
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransferMode {
    /// N teachers, one student.
    #[serde(rename = "N21")]
    N21,
    /// One teacher, N students.
    #[serde(rename = "12N")]
    OneToN,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::N21 => "N21",
            TransferMode::OneToN => "12N",
        })
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N21" | "n21" => Ok(TransferMode::N21),
            "12N" | "12n" => Ok(TransferMode::OneToN),
            other => Err(Error::Config(format!("unknown transfer mode `{other}` (expected N21 or 12N)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataCondition {
    /// Teachers train on genuine parallel documents.
    Genuine,
    /// Teachers train on back-translated pseudo documents.
    Bt,
}

impl FromStr for DataCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genuine" => Ok(DataCondition::Genuine),
            "bt" => Ok(DataCondition::Bt),
            other => Err(Error::Config(format!("unknown data condition `{other}` (expected genuine or bt)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    /// One pair per non-shared language; each is a teacher or student candidate.
    pub pairs: Vec<LanguagePair>,
    pub modes: Vec<TransferMode>,
    pub p_values: Vec<f64>,
    pub condition: DataCondition,
    pub seeds: Vec<u64>,
    pub pipeline: PipelineConfig,
    pub bt: BTConfig,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("p={p} outside [0, 1]")));
        }
        if self.p_values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one p value and one seed".into()));
        }
        let mut seen = self.pairs.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.pairs.len() {
            return Err(Error::Config("grid lists a language pair twice".into()));
        }
        Ok(())
    }

    /// Only the sentence-level baseline is requested.
    fn baseline_only(&self) -> bool {
        self.p_values.iter().all(|&p| p == 0.0)
    }
}

/// A concrete finetuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub seed: u64,
    pub mode: TransferMode,
    pub p: f64,
    /// Index of the teacher/student assignment within its mode.
    pub config: usize,
    pub teachers: Vec<LanguagePair>,
    pub students: Vec<LanguagePair>,
}

/// N21: each language once the student; 12N: each language once the teacher.
/// Ordered by seed, mode, p, configuration.
pub fn enumerate_configs(grid: &ExperimentGrid) -> Result<Vec<RunSpec>> {
    grid.validate()?;
    let n = grid.pairs.len();
    if n < 2 {
        return Err(Error::Config(format!("transfer needs at least 2 languages, grid has {n}")));
    }
    let mut runs = Vec::new();
    for &seed in &grid.seeds {
        for &mode in &grid.modes {
            for &p in &grid.p_values {
                for config in 0..n {
                    let one = vec![grid.pairs[config].clone()];
                    let rest: Vec<LanguagePair> =
                        grid.pairs.iter().enumerate().filter(|&(i, _)| i != config).map(|(_, x)| x.clone()).collect();
                    let (teachers, students) = match mode {
                        TransferMode::N21 => (rest, one),
                        TransferMode::OneToN => (one, rest),
                    };
                    runs.push(RunSpec { seed, mode, p, config, teachers, students });
                }
            }
        }
    }
    Ok(runs)
}

/// Metrics of one transfer direction (one student of one run).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionRow {
    pub seed: u64,
    /// `None` for the sentence-level baseline.
    pub mode: Option<TransferMode>,
    pub p: f64,
    pub config: usize,
    pub teachers: Vec<LanguagePair>,
    pub student: LanguagePair,
    pub infer: InferMode,
    pub teacher_sentences: usize,
    pub student_sentences: usize,
    pub metrics: DirectionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: TransferMode,
    pub p: f64,
    pub infer: InferMode,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    /// Number of configuration-level values (configurations × seeds).
    pub n: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per `(mode, p, infer, metric)`: directions are averaged within each run
/// first, then the run averages are summarized by mean and (population)
/// standard deviation.
pub fn aggregate(rows: &[DirectionRow]) -> Vec<AggregateRow> {
    type Key = (TransferMode, u64, InferMode, usize);
    let mut per_run: BTreeMap<(Key, u64, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let Some(mode) = r.mode else { continue };
        for (mi, v) in r.metrics.values().iter().enumerate() {
            if let Some(v) = v {
                let key = (mode, r.p.to_bits(), r.infer, mi);
                per_run.entry((key, r.seed, r.config)).or_default().push(*v);
            }
        }
    }
    let mut per_key: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for (((mode, p, infer, mi), _, _), vals) in per_run {
        per_key.entry((mode, p, infer, mi)).or_default().push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    per_key
        .into_iter()
        .map(|((mode, p, infer, mi), vals)| {
            let (mean, std) = mean_std(&vals);
            AggregateRow {
                mode,
                p: f64::from_bits(p),
                infer,
                metric: DirectionMetrics::NAMES[mi].to_string(),
                mean,
                std,
                n: vals.len(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub group: String,
    pub metric: String,
    /// `None` when no direction falls in the group.
    pub mean: Option<f64>,
    pub n: usize,
}

/// `High→`/`Low→` average directions whose teacher data is at least / at most
/// `threshold` sentences; `→High`/`→Low` group by the student's data.
pub fn group_by_resource(rows: &[DirectionRow], metric: &str, threshold: usize) -> Result<Vec<GroupAggregate>> {
    let mi = DirectionMetrics::NAMES
        .iter()
        .position(|&m| m == metric)
        .ok_or_else(|| Error::Config(format!("unknown metric `{metric}`")))?;
    type Pick = fn(&DirectionRow, usize) -> bool;
    let groups: [(&str, Pick); 4] = [
        ("High→", |r, t| r.teacher_sentences >= t),
        ("Low→", |r, t| r.teacher_sentences <= t),
        ("→High", |r, t| r.student_sentences >= t),
        ("→Low", |r, t| r.student_sentences <= t),
    ];
    Ok(groups
        .iter()
        .map(|(name, pick)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| pick(r, threshold))
                .filter_map(|r| r.metrics.values()[mi])
                .collect();
            GroupAggregate {
                group: name.to_string(),
                metric: metric.to_string(),
                mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                n: vals.len(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub grid: ExperimentGrid,
    pub seeds: Vec<u64>,
    /// `(pair, sha256 of the rendered training corpora)`.
    pub corpus_hashes: Vec<(String, String)>,
    pub reverse_models: Vec<ReverseManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub manifest: SweepManifest,
    pub baseline: Vec<DirectionRow>,
    pub rows: Vec<DirectionRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn pairs_label(pairs: &[LanguagePair]) -> String {
    pairs.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("+")
}

fn infer_label(m: InferMode) -> &'static str {
    match m {
        InferMode::Sen => "sen",
        InferMode::Doc => "doc",
    }
}

impl SweepReport {
    pub fn directions_tsv(&self) -> String {
        let mut out = String::from("seed\tmode\tp\tconfig\tteachers\tstudent\tinfer\tteacher_sents\tstudent_sents");
        for m in DirectionMetrics::NAMES {
            out.push('\t');
            out.push_str(m);
        }
        out.push('\n');
        for r in self.baseline.iter().chain(&self.rows) {
            let mode = r.mode.map_or_else(|| "baseline".to_string(), |m| m.to_string());
            out.push_str(&format!(
                "{}\t{mode}\t{:.2}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.seed,
                r.p,
                r.config,
                pairs_label(&r.teachers),
                r.student,
                infer_label(r.infer),
                r.teacher_sentences,
                r.student_sentences
            ));
            for v in r.metrics.values() {
                out.push('\t');
                out.push_str(&fmt_metric(v));
            }
            out.push('\n');
        }
        out
    }

    /// One figure-analog table: p on rows, `metric_mean`/`metric_std` columns.
    pub fn figure_tsv(&self, mode: TransferMode, infer: InferMode) -> String {
        let mut out = String::from("p");
        for m in DirectionMetrics::NAMES {
            out.push_str(&format!("\t{m}_mean\t{m}_std"));
        }
        out.push_str("\tn\n");
        let mut ps: Vec<f64> = self.aggregates.iter().filter(|a| a.mode == mode).map(|a| a.p).collect();
        ps.sort_by(f64::total_cmp);
        ps.dedup();
        for p in ps {
            let rows: Vec<&AggregateRow> =
                self.aggregates.iter().filter(|a| a.mode == mode && a.infer == infer && a.p == p).collect();
            out.push_str(&format!("{p:.2}"));
            let mut n = 0;
            for m in DirectionMetrics::NAMES {
                match rows.iter().find(|a| a.metric == m) {
                    Some(a) => {
                        out.push_str(&format!("\t{:.6}\t{:.6}", a.mean, a.std));
                        n = a.n;
                    }
                    None => out.push_str("\tNA\tNA"),
                }
            }
            out.push_str(&format!("\t{n}\n"));
        }
        out
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n"
    }

    /// Writes `directions.tsv`, one `<mode>_<infer>.tsv` per figure analog and
    /// `manifest.json`. Returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![("directions.tsv".to_string(), self.directions_tsv())];
        for &mode in &self.manifest.grid.modes {
            for infer in [InferMode::Sen, InferMode::Doc] {
                files.push((format!("{mode}_{}.tsv", infer_label(infer)), self.figure_tsv(mode, infer)));
            }
        }
        files.push(("manifest.json".to_string(), self.manifest_json()));
        let mut written = Vec::new();
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn corpus_hash(c: &ParallelDocCorpus) -> String {
    let mut h = Sha256::new();
    h.update(render_doc_corpus(&c.src));
    h.update([0u8]);
    h.update(render_doc_corpus(&c.tgt));
    format!("{:x}", h.finalize())
}

/// Runs every configuration of the grid. One sentence-level model is
/// pretrained per seed and shared by all runs of that seed; `p = 0` runs
/// evaluate it without finetuning. Only transfer directions (students) are
/// evaluated, with both SenInfer and DocInfer.
pub fn run_sweep(grid: &ExperimentGrid, registry: &Registry) -> Result<SweepReport> {
    grid.validate()?;
    let data: Vec<&PairData> = grid.pairs.iter().map(|p| registry.get(p)).collect::<Result<_>>()?;
    if grid.condition == DataCondition::Bt {
        if let Some(d) = data.iter().find(|d| d.mono.is_none()) {
            return Err(Error::Missing(format!("monolingual target documents for {}", d.pair)));
        }
    }
    let runs = if grid.baseline_only() && grid.pairs.len() < 2 { Vec::new() } else { enumerate_configs(grid)? };
    let sub = Registry { pairs: data.iter().map(|d| (*d).clone()).collect() };
    let mut manifest = SweepManifest {
        grid: grid.clone(),
        seeds: grid.seeds.clone(),
        corpus_hashes: data.iter().map(|d| (d.pair.to_string(), corpus_hash(&d.train))).collect(),
        reverse_models: Vec::new(),
    };
    let sents = |pair: &LanguagePair| data.iter().find(|d| &d.pair == pair).map_or(0, |d| d.train.num_sents());
    let mut baseline = Vec::new();
    let mut rows = Vec::new();
    for &seed in &grid.seeds {
        let mut cfg = grid.pipeline.clone();
        cfg.pretrain.seed = seed;
        let vocab = train_vocab(&sub, cfg.vocab_size)?;
        let pre = pretrain(&sub, &vocab, &cfg)?;
        let sennmt = pre.averaged(cfg.average_last)?;
        let evaluate = |params: &ModelParams<f32>, run: Option<&RunSpec>, student: &PairData, out: &mut Vec<DirectionRow>| -> Result<()> {
            for infer in [InferMode::Sen, InferMode::Doc] {
                let metrics = evaluate_direction(params, &vocab, student, infer, &cfg)?;
                let teachers = run.map_or_else(Vec::new, |r| r.teachers.clone());
                out.push(DirectionRow {
                    seed,
                    mode: run.map(|r| r.mode),
                    p: run.map_or(0.0, |r| r.p),
                    config: run.map_or(0, |r| r.config),
                    teacher_sentences: teachers.iter().map(sents).sum(),
                    teachers,
                    student: student.pair.clone(),
                    infer,
                    student_sentences: student.train.num_sents(),
                    metrics,
                });
            }
            Ok(())
        };
        for d in &data {
            evaluate(&sennmt, None, d, &mut baseline)?;
        }
        let mut pseudo: BTreeMap<LanguagePair, ParallelDocCorpus> = BTreeMap::new();
        for run in runs.iter().filter(|r| r.seed == seed) {
            let finetuned = if run.p == 0.0 {
                None
            } else {
                let mut teacher_docs = Vec::new();
                for t in &run.teachers {
                    let d = registry.get(t)?;
                    match grid.condition {
                        DataCondition::Genuine => teacher_docs.push(d.train.clone()),
                        DataCondition::Bt => {
                            if !pseudo.contains_key(t) {
                                let rev = train_reverse_bilingual(t, &d.train, &cfg, &grid.bt)?;
                                let mono = d.mono.as_ref().expect("checked above");
                                pseudo.insert(t.clone(), back_translate_docs(&rev, mono, &grid.bt)?);
                                manifest.reverse_models.push(rev.manifest);
                            }
                            teacher_docs.push(pseudo[t].clone());
                        }
                    }
                }
                let students: Vec<&ParallelDocCorpus> =
                    run.students.iter().map(|s| registry.get(s).map(|d| &d.train)).collect::<Result<_>>()?;
                let teachers: Vec<&ParallelDocCorpus> = teacher_docs.iter().collect();
                let ft_seed = crate::rng::derive_seed(seed, &[run.mode as u64, run.p.to_bits(), run.config as u64]);
                let ft = finetune(&pre, &vocab, &teachers, &students, run.p, ft_seed, &cfg)?;
                Some(ft.averaged(cfg.average_last)?)
            };
            let params = finetuned.as_ref().unwrap_or(&sennmt);
            for s in &run.students {
                evaluate(params, Some(run), registry.get(s)?, &mut rows)?;
            }
        }
    }
    let aggregates = aggregate(&rows);
    Ok(SweepReport { manifest, baseline, rows, aggregates })
}
