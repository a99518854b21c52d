//! Binary training checkpoints.
//!
//! Layout (little-endian): magic `HATR`, u32 version, u64-length-prefixed
//! JSON config block, u64 step, batch-order state, parameter records
//! `(name, shape, f64 data)`, batch-norm statistics, optimizer state.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Recognizer};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::RunningStats;
use crate::tensor::Tensor;
use crate::trainer::{BatchOrder, OptimizerKind, Optimizer, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"HATR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigBlock {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                what: "checkpoint",
                expected: format!("{n} more bytes at offset {}", self.pos),
                found: format!("{} bytes", self.buf.len() - self.pos),
            });
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
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // every length prefixes at least one byte per item
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Format {
                what: "checkpoint",
                expected: format!("length fitting in the remaining {} bytes", self.buf.len() - self.pos),
                found: n.to_string(),
            });
        }
        Ok(n as usize)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format {
            what: "checkpoint",
            expected: "UTF-8 name".into(),
            found: "invalid bytes".into(),
        })
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn mismatch(what: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Format {
        what,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Serializes the full training state.
pub fn to_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let block = ConfigBlock {
        model: trainer.model.config.clone(),
        train: trainer.config.clone(),
    };
    w.bytes(&serde_json::to_vec(&block).map_err(|e| Error::Invalid(e.to_string()))?);
    w.u64(trainer.step);

    let order = &trainer.order;
    w.0.extend_from_slice(&order.rng.get_seed());
    w.u64(order.rng.get_stream());
    w.0.extend_from_slice(&order.rng.get_word_pos().to_le_bytes());
    w.len(order.perm.len());
    for &i in &order.perm {
        w.u64(i as u64);
    }
    w.len(order.cursor);

    let store = &trainer.model.store;
    w.len(store.len());
    for (name, t) in store.iter() {
        w.bytes(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
    let stats: Vec<_> = store.iter_stats().collect();
    w.len(stats.len());
    for (name, s) in stats {
        w.bytes(name.as_bytes());
        w.f64s(&s.mean);
        w.f64s(&s.var);
    }

    let opt = &trainer.optimizer;
    w.u8(match opt.kind {
        OptimizerKind::Adadelta => 0,
        OptimizerKind::Sgd => 1,
    });
    w.len(opt.state.len());
    for (eg2, edx2) in &opt.state {
        w.f64s(eg2);
        w.f64s(edx2);
    }
    Ok(w.0)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(mismatch("checkpoint magic", "HATR", String::from_utf8_lossy(magic)));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(mismatch("checkpoint version", VERSION, version));
    }
    let block: ConfigBlock =
        serde_json::from_slice(r.bytes()?).map_err(|e| mismatch("checkpoint config", "valid JSON config", e))?;
    block.model.validate()?;
    block.train.validate()?;
    let step = r.u64()?;

    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let n = r.len()?;
    let perm = (0..n).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
    let cursor = r.len()?;

    let mut store = ParamStore::new();
    for _ in 0..r.len()? {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s()?;
        store.insert(name, Tensor::new(&shape, data)?)?;
    }
    for _ in 0..r.len()? {
        let name = r.string()?;
        let mean = r.f64s()?;
        let var = r.f64s()?;
        if mean.len() != var.len() {
            return Err(mismatch("batch-norm statistics", mean.len(), var.len()));
        }
        store.insert_stats(name, RunningStats { mean, var });
    }
    let kind = match r.u8()? {
        0 => OptimizerKind::Adadelta,
        1 => OptimizerKind::Sgd,
        k => return Err(mismatch("optimizer kind", "0 or 1", k)),
    };
    if kind != block.train.optimizer {
        return Err(mismatch("optimizer kind", format!("{:?}", block.train.optimizer), format!("{kind:?}")));
    }
    let mut state = Vec::new();
    for _ in 0..r.len()? {
        state.push((r.f64s()?, r.f64s()?));
    }
    if r.pos != bytes.len() {
        return Err(mismatch("checkpoint", "end of data", format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let model = Recognizer::from_store(block.model, store)?;
    if kind == OptimizerKind::Adadelta {
        let ok = state.len() == model.store.len()
            && state
                .iter()
                .zip(model.store.iter())
                .all(|((a, b), (_, t))| a.len() == t.numel() && b.len() == t.numel());
        if !ok {
            return Err(mismatch("optimizer state", "one accumulator pair per parameter", state.len()));
        }
    }
    Ok(Trainer {
        optimizer: Optimizer {
            kind,
            rho: block.train.rho,
            eps: block.train.eps,
            lr: block.train.lr,
            state,
        },
        config: block.train,
        model,
        step,
        order: BatchOrder { rng, perm, cursor },
    })
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(trainer)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
