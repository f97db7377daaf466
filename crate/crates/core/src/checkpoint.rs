//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//! ```text
//! DOCNMT-CHECKPOINT v1\n
//! u64 length + JSON metadata (model config, stage)
//! u32 tensor count, then per tensor: u32 name length, name, u32 rank, u64 dims, f32 data
//! u8 optimizer flag; if 1: first moments then second moments, same tensor order
//! u64 step
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

const MAGIC: &[u8] = b"DOCNMT-CHECKPOINT v1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::Config(format!("unknown stage `{other}` (expected pretrain or finetune)"))),
        }
    }
}

/// Adam first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Ok(Self { m: ModelParams::zeros(config)?, v: ModelParams::zeros(config)? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamState>,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    stage: Stage,
}

fn write_tensors(out: &mut Vec<u8>, params: &ModelParams<f32>) {
    let tensors = params.tensors();
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend((d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend(x.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensors(cur: &mut Cursor<'_>, config: &ModelConfig) -> Result<ModelParams<f32>> {
    let mut params = ModelParams::<f32>::zeros(config)?;
    let count = cur.u32()? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", slots.len())));
    }
    for (name, t) in slots.iter_mut() {
        let len = cur.u32()? as usize;
        let found = String::from_utf8_lossy(cur.take(len)?).into_owned();
        if &found != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {found}")));
        }
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != t.shape {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {shape:?}, expected {:?}", t.shape)));
        }
        let bytes = cur.take(4 * t.data.len())?;
        for (x, b) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    drop(slots);
    Ok(params)
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let meta = serde_json::to_vec(&Meta { config: self.params.config.clone(), stage: self.stage })
            .expect("config serializes");
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(meta);
        write_tensors(&mut out, &self.params);
        match &self.optimizer {
            Some(adam) => {
                out.push(1);
                write_tensors(&mut out, &adam.m);
                write_tensors(&mut out, &adam.v);
            }
            None => out.push(0),
        }
        out.extend(self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if !buf.starts_with(MAGIC) {
            return Err(Error::Checkpoint("missing checkpoint header".into()));
        }
        let mut cur = Cursor { buf, pos: MAGIC.len() };
        let len = cur.u64()? as usize;
        let meta: Meta = serde_json::from_slice(cur.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        meta.config.validate()?;
        let params = read_tensors(&mut cur, &meta.config)?;
        let optimizer = match cur.u8()? {
            0 => None,
            1 => Some(AdamState { m: read_tensors(&mut cur, &meta.config)?, v: read_tensors(&mut cur, &meta.config)? }),
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        let step = cur.u64()?;
        if cur.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - cur.pos)));
        }
        Ok(Checkpoint { stage: meta.stage, params, optimizer, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Coordinate-wise mean of the last `k` parameter sets; optimizer state is dropped.
pub fn average_checkpoints(checkpoints: &[Checkpoint], k: usize) -> Result<ModelParams<f32>> {
    if k == 0 || checkpoints.len() < k {
        return Err(Error::Checkpoint(format!("averaging needs {k} checkpoints, have {}", checkpoints.len())));
    }
    let last = &checkpoints[checkpoints.len() - k..];
    let config = &last[0].params.config;
    if let Some(c) = last.iter().find(|c| &c.params.config != config) {
        return Err(Error::Checkpoint(format!(
            "checkpoint at step {} differs in {}",
            c.step,
            config.differences(&c.params.config).join(", ")
        )));
    }
    let mut sum = last[0].params.cast::<f64>();
    for c in &last[1..] {
        for ((_, acc), (_, t)) in sum.tensors_mut().into_iter().zip(c.params.tensors()) {
            for (a, &x) in acc.data.iter_mut().zip(&t.data) {
                *a += x as f64;
            }
        }
    }
    for (_, t) in sum.tensors_mut() {
        t.data.iter_mut().for_each(|a| *a /= k as f64);
    }
    Ok(sum.cast())
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(40, vec!["xx".into()])
    }

    fn ckpt(seed: u64, step: u64) -> Checkpoint {
        let params = init_model(&cfg(), seed).unwrap();
        let mut optimizer = AdamState::new(&cfg()).unwrap();
        optimizer.m.tok_emb.data[3] = 0.25;
        Checkpoint { stage: Stage::Pretrain, params, optimizer: Some(optimizer), step }
    }

    #[test]
    fn bytes_roundtrip() {
        let c = ckpt(1, 17);
        let bytes = c.to_bytes();
        assert!(bytes.starts_with(b"DOCNMT-CHECKPOINT v1\n"));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = Checkpoint { optimizer: None, ..ckpt(2, 3) };
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn averaging_identities() {
        let same: Vec<Checkpoint> = (0..5).map(|s| ckpt(4, s)).collect();
        assert_eq!(average_checkpoints(&same, 5).unwrap(), same[0].params);

        let mut a = ckpt(1, 1);
        let mut b = ckpt(1, 2);
        a.params.tok_emb.data[0] = 0.0;
        b.params.tok_emb.data[0] = 2.0;
        let avg = average_checkpoints(&[a.clone(), b.clone()], 2).unwrap();
        assert_eq!(avg.tok_emb.data[0], 1.0);
        // only the last k participate
        assert_eq!(average_checkpoints(&[a.clone(), b.clone()], 1).unwrap(), b.params);
        assert!(average_checkpoints(&[a, b], 3).is_err());
    }
}
