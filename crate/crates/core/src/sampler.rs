//! Teacher/student data mixing.
//!
//! Each example of a batch is drawn independently: with probability `p` from
//! the teacher document pools (pool chosen by teacher weight), otherwise from
//! the student sentence pools (chosen by student weight), then uniformly from
//! the chosen pool, with replacement. Weights are proportional to the number
//! of sentences a pool covers, so the relative proportion among teachers
//! (and among students) follows the sentence-level statistics.
//!
//! Draw `i` depends only on `(seed, i)`.

use rand::Rng;

use crate::corpus::LanguagePair;
use crate::d2d::TrainingExample;
use crate::error::{Error, Result};
use crate::rng::derived_rng;

#[derive(Clone, Debug)]
pub struct Pool {
    pub pair: LanguagePair,
    pub examples: Vec<TrainingExample>,
    /// Sentences covered by the pool; the sampling weight.
    pub sentences: usize,
}

impl Pool {
    pub fn new(pair: LanguagePair, examples: Vec<TrainingExample>) -> Self {
        let sentences = examples.iter().map(|e| e.k).sum();
        Self {
            pair,
            examples,
            sentences,
        }
    }

    /// A pool whose weight is given explicitly rather than derived from its examples.
    pub fn with_weight(pair: LanguagePair, examples: Vec<TrainingExample>, sentences: usize) -> Self {
        Self {
            pair,
            examples,
            sentences,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub role: Role,
    pub pool: usize,
    pub example: usize,
}

#[derive(Clone, Debug)]
pub struct MixSchedule {
    teachers: Vec<Pool>,
    students: Vec<Pool>,
    p: f64,
    teacher_weights: Vec<f64>,
    student_weights: Vec<f64>,
    seed: u64,
    cursor: u64,
}

fn normalized_weights(pools: &[Pool]) -> Vec<f64> {
    let total: usize = pools.iter().map(|p| p.sentences).sum();
    pools
        .iter()
        .map(|p| if total == 0 { 0.0 } else { p.sentences as f64 / total as f64 })
        .collect()
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last pool with positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn build_schedule(teachers: Vec<Pool>, students: Vec<Pool>, p: f64, seed: u64) -> Result<MixSchedule> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("document proportion p={p} outside [0, 1]")));
    }
    let non_empty = |pools: &[Pool]| pools.iter().any(|pool| !pool.examples.is_empty() && pool.sentences > 0);
    if p > 0.0 && !non_empty(&teachers) {
        return Err(Error::Config(format!("p={p} requires at least one non-empty teacher pool")));
    }
    if p < 1.0 && !non_empty(&students) {
        return Err(Error::Config(format!("p={p} requires at least one non-empty student pool")));
    }
    for pool in teachers.iter().chain(&students) {
        if pool.sentences > 0 && pool.examples.is_empty() {
            return Err(Error::Config(format!("pool {} has weight but no examples", pool.pair)));
        }
    }
    Ok(MixSchedule {
        teacher_weights: normalized_weights(&teachers),
        student_weights: normalized_weights(&students),
        teachers,
        students,
        p,
        seed,
        cursor: 0,
    })
}

impl MixSchedule {
    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn teachers(&self) -> &[Pool] {
        &self.teachers
    }

    pub fn students(&self) -> &[Pool] {
        &self.students
    }

    pub fn teacher_weights(&self) -> &[f64] {
        &self.teacher_weights
    }

    pub fn student_weights(&self) -> &[f64] {
        &self.student_weights
    }

    /// Number of draws taken through [`MixSchedule::next_batch`].
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: u64) {
        self.cursor = cursor;
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &TrainingExample> {
        self.teachers.iter().chain(&self.students).flat_map(|p| p.examples.iter())
    }

    /// The `index`-th draw of the stream.
    pub fn draw_at(&self, index: u64) -> Draw {
        let mut rng = derived_rng(self.seed, &[index]);
        let u_role: f64 = rng.gen();
        let role = if u_role < self.p { Role::Teacher } else { Role::Student };
        let (pools, weights) = match role {
            Role::Teacher => (&self.teachers, &self.teacher_weights),
            Role::Student => (&self.students, &self.student_weights),
        };
        let pool = pick(weights, rng.gen());
        let example = rng.gen_range(0..pools[pool].examples.len());
        Draw { role, pool, example }
    }

    pub fn example(&self, draw: &Draw) -> &TrainingExample {
        let pools = match draw.role {
            Role::Teacher => &self.teachers,
            Role::Student => &self.students,
        };
        &pools[draw.pool].examples[draw.example]
    }

    /// Draws `batch_size` examples and advances the cursor.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<Draw> {
        let start = self.cursor;
        self.cursor += batch_size as u64;
        (start..self.cursor).map(|i| self.draw_at(i)).collect()
    }

    /// Stream for a parallel batch producer: same pools, seed derived from `(seed, worker)`.
    pub fn for_worker(&self, worker: u64) -> Self {
        let mut s = self.clone();
        s.seed = crate::rng::derive_seed(self.seed, &[u64::MAX, worker]);
        s.cursor = 0;
        s
    }
}
