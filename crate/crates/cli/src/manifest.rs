//! Experiment manifest: a sectioned key-value file (TOML syntax), parsed
//! strictly and resolved against a preset into concrete settings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use docnmt::btpipe::BTConfig;
use docnmt::corpus::LanguagePair;
use docnmt::decode::InferMode;
use docnmt::runner::{DataCondition, PipelineConfig, TransferMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A manifest that failed to parse or resolve; always a validation error.
#[derive(Debug)]
pub struct ManifestError(pub String);

impl std::fmt::Display for ManifestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ManifestError {}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(ManifestError(msg.into()).into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    experiment: Experiment,
    languages: Languages,
    corpora: Corpora,
    #[serde(default)]
    tokenizer: Tokenizer,
    #[serde(default)]
    model: Model,
    #[serde(default)]
    train: Train,
    schedule: Option<Schedule>,
    #[serde(default)]
    decode: Decode,
    #[serde(default)]
    metrics: Metrics,
    runner: Option<Runner>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Experiment {
    name: String,
    #[serde(default = "one")]
    seed: u64,
    /// Sentences per concatenated chunk.
    d: Option<usize>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Languages {
    pairs: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Corpora {
    dir: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tokenizer {
    vocab_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Model {
    #[serde(default = "desk")]
    preset: String,
}

impl Default for Model {
    fn default() -> Self {
        Self { preset: desk() }
    }
}

fn desk() -> String {
    "desk".into()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Train {
    pretrain_steps: Option<u64>,
    finetune_steps: Option<u64>,
    warmup: Option<u64>,
    batch_size: Option<usize>,
    lr_scale: Option<f64>,
    keep_last: Option<usize>,
    checkpoint_interval: Option<u64>,
    average_last: Option<usize>,
    clip_norm: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Schedule {
    p: f64,
    teachers: Vec<String>,
    students: Vec<String>,
    #[serde(default = "genuine")]
    condition: String,
}

fn genuine() -> String {
    "genuine".into()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Decode {
    beam: Option<usize>,
    alpha: Option<f64>,
    mode: Option<String>,
    max_len: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metrics {
    /// Context sentences for contrastive scoring; defaults to `D - 1`.
    context: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Runner {
    modes: Vec<String>,
    p_values: Vec<f64>,
    seeds: Option<Vec<u64>>,
    #[serde(default = "genuine")]
    condition: String,
    resource_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleSpec {
    pub p: f64,
    pub teachers: Vec<LanguagePair>,
    pub students: Vec<LanguagePair>,
    pub condition: DataCondition,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunnerSpec {
    pub modes: Vec<TransferMode>,
    pub p_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub condition: DataCondition,
    pub resource_threshold: Option<usize>,
}

/// Fully resolved settings; its JSON rendering is what gets hashed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub name: String,
    pub seed: u64,
    pub pairs: Vec<LanguagePair>,
    pub corpora_dir: PathBuf,
    pub pipeline: PipelineConfig,
    pub bt: BTConfig,
    pub contrastive_context: usize,
    pub schedule: Option<ScheduleSpec>,
    pub runner: Option<RunnerSpec>,
}

impl Resolved {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("resolved manifest serializes") + "\n"
    }

    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_json().as_bytes()))
    }

    /// `runs/<first 12 hex digits of the hash>-s<seed>`, relative to the workdir.
    pub fn run_dir_name(&self) -> PathBuf {
        Path::new("runs").join(format!("{}-s{}", &self.hash()[..12], self.seed))
    }
}

fn parse_pair(s: &str, known: &[LanguagePair]) -> Result<LanguagePair> {
    let pair: LanguagePair = s.parse().map_err(|e: docnmt::Error| ManifestError(e.to_string()))?;
    if !known.contains(&pair) {
        return invalid(format!("{pair} is not listed in [languages] pairs"));
    }
    Ok(pair)
}

fn parse_condition(s: &str) -> Result<DataCondition> {
    s.parse().map_err(|e: docnmt::Error| ManifestError(e.to_string()).into())
}

/// Applies `section.key=value` overrides, printing an audit line for each.
fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let Some((path, value)) = o.split_once('=') else {
            return invalid(format!("override `{o}` is not of the form section.key=value"));
        };
        let Some((section, key)) = path.trim().split_once('.') else {
            return invalid(format!("override `{o}` must name section.key"));
        };
        let value = value.trim();
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let sec = table
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ManifestError(format!("`{section}` is not a section")))?;
        let old = sec.insert(key.to_string(), parsed.clone());
        let old = old.map_or_else(|| "unset".to_string(), |v| v.to_string());
        eprintln!("override {section}.{key}: {old} -> {parsed}");
    }
    Ok(())
}

pub fn parse(text: &str, overrides: &[String]) -> Result<Resolved> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ManifestError(e.to_string()))?;
    apply_overrides(&mut table, overrides)?;
    let raw: Raw = table.try_into().map_err(|e: toml::de::Error| ManifestError(e.to_string()))?;
    resolve(raw)
}

pub fn load(path: &Path, overrides: &[String]) -> Result<Resolved> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    parse(&text, overrides).with_context(|| format!("in manifest {}", path.display()))
}

fn resolve(raw: Raw) -> Result<Resolved> {
    let mut pipeline = PipelineConfig::preset(&raw.model.preset).map_err(|e| ManifestError(e.to_string()))?;
    if raw.languages.pairs.is_empty() {
        return invalid("[languages] pairs is empty");
    }
    let pairs: Vec<LanguagePair> = raw
        .languages
        .pairs
        .iter()
        .map(|s| s.parse().map_err(|e: docnmt::Error| ManifestError(e.to_string()).into()))
        .collect::<Result<_>>()?;
    let mut sorted = pairs.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != pairs.len() {
        return invalid("[languages] pairs lists a pair twice");
    }

    if let Some(d) = raw.experiment.d {
        pipeline.d = d;
    }
    pipeline.beam.d = pipeline.d;
    if let Some(v) = raw.tokenizer.vocab_size {
        pipeline.vocab_size = v;
    }
    let t = &raw.train;
    if let Some(s) = t.pretrain_steps {
        pipeline.pretrain.steps = s;
    }
    if let Some(s) = t.finetune_steps {
        pipeline.finetune.steps = s;
    }
    for stage in [&mut pipeline.pretrain, &mut pipeline.finetune] {
        stage.seed = raw.experiment.seed;
        stage.warmup = t.warmup.unwrap_or(stage.warmup);
        stage.batch_size = t.batch_size.unwrap_or(stage.batch_size);
        stage.lr_scale = t.lr_scale.unwrap_or(stage.lr_scale);
        stage.keep_last = t.keep_last.unwrap_or(stage.keep_last);
        stage.checkpoint_interval = t.checkpoint_interval.unwrap_or(stage.checkpoint_interval);
        stage.clip_norm = t.clip_norm.or(stage.clip_norm);
        stage.validate().map_err(|e| ManifestError(e.to_string()))?;
    }
    if let Some(k) = t.average_last {
        pipeline.average_last = k;
    }
    if pipeline.average_last == 0 {
        return invalid("[train] average_last must be at least 1");
    }

    let dec = &raw.decode;
    pipeline.beam.beam = dec.beam.unwrap_or(pipeline.beam.beam);
    pipeline.beam.alpha = dec.alpha.unwrap_or(pipeline.beam.alpha);
    pipeline.beam.max_len = dec.max_len.or(pipeline.beam.max_len);
    if let Some(m) = &dec.mode {
        pipeline.beam.mode = m.parse::<InferMode>().map_err(|e| ManifestError(e.to_string()))?;
    }
    pipeline.beam.validate().map_err(|e| ManifestError(e.to_string()))?;
    let bt = BTConfig { beam: docnmt::decode::BeamConfig { mode: InferMode::Sen, ..pipeline.beam.clone() }, ..BTConfig::default() };

    let schedule = match raw.schedule {
        None => None,
        Some(s) => {
            if !(0.0..=1.0).contains(&s.p) {
                return invalid(format!("[schedule] p={} outside [0, 1]", s.p));
            }
            let teachers: Vec<LanguagePair> = s.teachers.iter().map(|x| parse_pair(x, &pairs)).collect::<Result<_>>()?;
            let students: Vec<LanguagePair> = s.students.iter().map(|x| parse_pair(x, &pairs)).collect::<Result<_>>()?;
            if let Some(both) = teachers.iter().find(|t| students.contains(t)) {
                return invalid(format!("{both} is both teacher and student"));
            }
            Some(ScheduleSpec { p: s.p, teachers, students, condition: parse_condition(&s.condition)? })
        }
    };
    let runner = match raw.runner {
        None => None,
        Some(r) => {
            let modes = r
                .modes
                .iter()
                .map(|m| m.parse::<TransferMode>().map_err(|e| ManifestError(e.to_string()).into()))
                .collect::<Result<Vec<_>>>()?;
            if let Some(p) = r.p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return invalid(format!("[runner] p={p} outside [0, 1]"));
            }
            Some(RunnerSpec {
                modes,
                p_values: r.p_values,
                seeds: r.seeds.unwrap_or_else(|| vec![raw.experiment.seed]),
                condition: parse_condition(&r.condition)?,
                resource_threshold: r.resource_threshold,
            })
        }
    };
    if raw.experiment.name.trim().is_empty() {
        bail!(ManifestError("[experiment] name is empty".into()));
    }
    Ok(Resolved {
        name: raw.experiment.name,
        seed: raw.experiment.seed,
        pairs,
        corpora_dir: PathBuf::from(raw.corpora.dir),
        contrastive_context: raw.metrics.context.unwrap_or(pipeline.d - 1),
        pipeline,
        bt,
        schedule,
        runner,
    })
}
