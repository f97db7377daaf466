//! Two-stage training: sentence-level pretraining, then document-level finetuning.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{average_checkpoints, AdamState, Checkpoint, Stage};
use crate::error::{Error, Result};
use crate::model::{init_model, loss_and_grads, Batch, ModelConfig, ModelParams};
use crate::rng::derive_seed;
use crate::sampler::{MixSchedule, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Examples per batch.
    pub batch_size: usize,
    /// `0` selects `steps / 10`.
    pub checkpoint_interval: u64,
    pub keep_last: usize,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f64,
    /// Global gradient-norm clipping; off by default.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Large-scale constants: 300K pretraining or 20K finetuning steps, 1280 examples per batch.
    pub fn full(stage: Stage) -> Self {
        Self {
            stage,
            steps: match stage {
                Stage::Pretrain => 300_000,
                Stage::Finetune => 20_000,
            },
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            batch_size: 1280,
            checkpoint_interval: 0,
            keep_last: 5,
            lr_scale: 1.0,
            clip_norm: None,
            seed: 1,
        }
    }

    /// Desk-scale defaults for a single CPU core.
    pub fn desk(stage: Stage) -> Self {
        Self {
            steps: match stage {
                Stage::Pretrain => 4000,
                Stage::Finetune => 1000,
            },
            warmup: 400,
            batch_size: 32,
            lr_scale: 1.0,
            ..Self::full(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.warmup == 0 {
            return Err(Error::Config("warmup must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.keep_last == 0 {
            return Err(Error::Config("keep_last must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps positive".into()));
        }
        if self.lr_scale <= 0.0 || self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("lr_scale and clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn interval(&self) -> u64 {
        if self.checkpoint_interval > 0 {
            self.checkpoint_interval
        } else {
            (self.steps / 10).max(1)
        }
    }
}

/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("learning rate is undefined at step 0".into()));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Bias-corrected Adam update at 1-based `step`.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut AdamState,
    step: u64,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Numeric { location: format!("gradients at step {step}") });
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
        for i in 0..p.data.len() {
            let gi = g.data[i] as f64;
            let mi = b1 * m.data[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v.data[i] as f64 + (1.0 - b2) * gi * gi;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + config.eps);
            p.data[i] = (p.data[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// One line of the training log, written every checkpoint interval.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub mean_loss: f64,
    pub doc_fraction: f64,
}

pub fn log_to_tsv(rows: &[LogRow]) -> String {
    let mut out = String::from("step\tlr\tmean_loss\tdoc_fraction\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6e}\t{:.6}\t{:.4}\n", r.step, r.lr, r.mean_loss, r.doc_fraction));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    /// The last `keep_last` interval checkpoints; the final one is last.
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

impl TrainRun {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("a run always keeps its final checkpoint")
    }

    pub fn averaged(&self, k: usize) -> Result<ModelParams<f32>> {
        average_checkpoints(&self.checkpoints, k.min(self.checkpoints.len()))
    }
}

fn global_norm(g: &ModelParams<f32>) -> f64 {
    g.tensors()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Runs steps `start.step + 1 ..= config.steps`. Batch `s` uses draws
/// `[(s-1)·B, s·B)` of the schedule and a dropout seed derived from `(seed, s)`,
/// so resuming from any saved checkpoint reproduces the uninterrupted run.
fn run(mut ckpt: Checkpoint, schedule: &mut MixSchedule, config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    let d_model = ckpt.params.config.d_model;
    let mut adam = match ckpt.optimizer.take() {
        Some(a) => a,
        None => AdamState::new(&ckpt.params.config)?,
    };
    let mut params = ckpt.params;
    let interval = config.interval();
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    let mut losses = Vec::new();
    let (mut acc_loss, mut acc_steps, mut acc_docs, mut acc_examples) = (0.0, 0u64, 0usize, 0usize);
    for step in ckpt.step + 1..=config.steps {
        schedule.set_cursor((step - 1) * config.batch_size as u64);
        let draws = schedule.next_batch(config.batch_size);
        let examples: Vec<_> = draws.iter().map(|d| schedule.example(d)).collect();
        acc_docs += draws.iter().filter(|d| d.role == Role::Teacher).count();
        acc_examples += draws.len();
        let batch = Batch::from_examples(examples.iter().copied())?;
        let dropout_seed = derive_seed(config.seed, &[0x7EA1, step]);
        let (loss, mut grads) = loss_and_grads(&params, &batch, Some(dropout_seed)).map_err(|e| match e {
            Error::Numeric { location } => Error::Numeric { location: format!("{location} at step {step}") },
            other => other,
        })?;
        if let Some(max) = config.clip_norm {
            let norm = global_norm(&grads);
            if norm > max {
                let s = (max / norm) as f32;
                for (_, t) in grads.tensors_mut() {
                    t.data.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let lr = config.lr_scale * lr_at(step, d_model, config.warmup)?;
        adam_step(&mut params, &grads, &mut adam, step, lr, config)?;
        losses.push(loss as f64);
        acc_loss += loss as f64;
        acc_steps += 1;
        if step % interval == 0 || step == config.steps {
            log.push(LogRow {
                step,
                lr,
                mean_loss: acc_loss / acc_steps as f64,
                doc_fraction: acc_docs as f64 / acc_examples.max(1) as f64,
            });
            (acc_loss, acc_steps, acc_docs, acc_examples) = (0.0, 0, 0, 0);
            checkpoints.push(Checkpoint {
                stage: config.stage,
                params: params.clone(),
                optimizer: Some(adam.clone()),
                step,
            });
            if checkpoints.len() > config.keep_last {
                checkpoints.remove(0);
            }
        }
    }
    if checkpoints.is_empty() {
        checkpoints.push(Checkpoint { stage: config.stage, params, optimizer: Some(adam), step: ckpt.step });
    }
    Ok(TrainRun { checkpoints, log, losses })
}

fn check_stage(config: &TrainConfig, want: Stage) -> Result<()> {
    if config.stage != want {
        return Err(Error::Config(format!("train config is for stage {}, expected {want}", config.stage)));
    }
    Ok(())
}

/// Sentence-level pretraining from a fresh initialization.
pub fn pretrain_sennmt(model: &ModelConfig, schedule: &mut MixSchedule, config: &TrainConfig) -> Result<TrainRun> {
    check_stage(config, Stage::Pretrain)?;
    if schedule.p() != 0.0 {
        return Err(Error::Config(format!("pretraining requires p=0, got p={}", schedule.p())));
    }
    if schedule.students().iter().flat_map(|p| &p.examples).any(|e| e.is_document()) {
        return Err(Error::Config("pretraining schedule contains document examples".into()));
    }
    let params = init_model(model, config.seed)?;
    run(Checkpoint { stage: Stage::Pretrain, params, optimizer: None, step: 0 }, schedule, config)
}

/// Document-level finetuning from a pretrained checkpoint with fresh optimizer
/// state and step counter.
pub fn finetune_docnmt(init: &Checkpoint, model: &ModelConfig, schedule: &mut MixSchedule, config: &TrainConfig) -> Result<TrainRun> {
    check_stage(config, Stage::Finetune)?;
    let diff = model.differences(&init.params.config);
    if !diff.is_empty() {
        return Err(Error::Config(format!("checkpoint model differs in: {}", diff.join(", "))));
    }
    let start = Checkpoint { stage: Stage::Finetune, params: init.params.clone(), optimizer: None, step: 0 };
    run(start, schedule, config)
}

/// Continues a run from one of its own checkpoints.
pub fn resume(from: &Checkpoint, schedule: &mut MixSchedule, config: &TrainConfig) -> Result<TrainRun> {
    check_stage(config, from.stage)?;
    if from.optimizer.is_none() {
        return Err(Error::Checkpoint("cannot resume without optimizer state".into()));
    }
    run(from.clone(), schedule, config)
}
