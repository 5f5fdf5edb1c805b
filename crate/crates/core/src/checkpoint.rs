//! Binary checkpoints: model parameters, momentum buffers, epoch counter
//! and shuffling RNG state, enough to resume training bitwise.
//!
//! Layout (little-endian): magic `DBSW`, u32 version, u64 epoch, u32-length
//! UTF-8 block of `key=value` lines, u32 tensor count followed by records of
//! (u32-length name, u32 rank, u64 dims, f64 payload), the momentum buffers
//! in the same format, and the four u64 words of the RNG state.

use std::fs;
use std::path::Path;

use dbswin_tensor::Tensor;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::DbSwin;
use crate::training::Trainer;

pub const MAGIC: &[u8; 4] = b"DBSW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub config: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
    pub rng: [u64; 4],
}

fn rng_state(rng: &Xoshiro256StarStar) -> Result<[u64; 4]> {
    let v = serde_json::to_value(rng).map_err(|e| Error::Checkpoint(e.to_string()))?;
    serde_json::from_value(v["s"].clone()).map_err(|e| Error::Checkpoint(format!("rng state: {e}")))
}

fn rng_from_state(state: [u64; 4]) -> Result<Xoshiro256StarStar> {
    if state == [0; 4] {
        return Err(Error::Checkpoint("rng state is all zeros".into()));
    }
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_mut(8).zip(state) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    Ok(Xoshiro256StarStar::from_seed(seed))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn tensors(&mut self, what: &str) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string("tensor name")?;
            let rank = self.u32("tensor rank")? as usize;
            let dims = (0..rank)
                .map(|_| Ok(self.u64("tensor dims")? as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: dimensions {dims:?} overflow")))?;
            let raw = self.take(n.saturating_mul(8), &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_str(out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    /// Snapshot of a trainer together with the run configuration that
    /// rebuilds its model.
    pub fn capture(trainer: &Trainer, run: &RunConfig) -> Result<Self> {
        let ps = trainer.model.params();
        let params = ps
            .iter()
            .map(|(_, p)| (p.name().to_string(), p.value().clone()))
            .collect();
        let momentum = ps
            .iter()
            .zip(trainer.momentum())
            .map(|((_, p), buf)| Ok((p.name().to_string(), Tensor::new(p.value().shape(), buf.clone())?)))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            epoch: trainer.epoch() as u64,
            config: run.to_pairs(),
            params,
            momentum,
            rng: rng_state(trainer.rng())?,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut out, &text);
        put_tensors(&mut out, &self.params);
        put_tensors(&mut out, &self.momentum);
        for w in self.rng {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let epoch = r.u64("epoch")?;
        let config = r
            .string("config")?
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Checkpoint(format!("bad config line {l:?}")))
            })
            .collect::<Result<_>>()?;
        let params = r.tensors("parameters")?;
        let momentum = r.tensors("momentum")?;
        let mut rng = [0u64; 4];
        for w in &mut rng {
            *w = r.u64("rng state")?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after rng state",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            epoch,
            config,
            params,
            momentum,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_pairs(&self.config)
    }

    /// Rebuilds the model and copies in the stored parameters.
    pub fn model(&self) -> Result<DbSwin> {
        let run = self.run_config()?;
        let mut model = DbSwin::new(run.model, run.train.seed)?;
        if self.params.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .params()
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let dst = model.params_mut().value_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    /// Rebuilds the trainer exactly as it was captured.
    pub fn trainer(&self) -> Result<(Trainer, RunConfig)> {
        let run = self.run_config()?;
        let model = self.model()?;
        let mut momentum = Vec::with_capacity(self.momentum.len());
        for (id, p) in model.params().iter() {
            let (name, t) = self
                .momentum
                .get(id.index())
                .ok_or_else(|| Error::Checkpoint("missing momentum buffers".into()))?;
            if name != p.name() || t.shape() != p.value().shape() {
                return Err(Error::Checkpoint(format!(
                    "momentum buffer {name} does not match parameter {}",
                    p.name()
                )));
            }
            momentum.push(t.data().to_vec());
        }
        let trainer = Trainer::resume(
            model,
            run.train.clone(),
            momentum,
            self.epoch as usize,
            rng_from_state(self.rng)?,
        )?;
        Ok((trainer, run))
    }
}
