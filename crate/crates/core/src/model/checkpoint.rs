//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `CAPK`, `u32` version, `u64` header length,
//! JSON header, `u32` parameter count, then per parameter a `u16` name
//! length, the name, `u32` rank, `u32` extents and `f64` values. When the
//! header says so, Adam state follows in parameter order: `u64` update
//! count, first moments, second moments.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, TrainState};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"CAPK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    relations: Vec<String>,
    seed: u64,
    step: u64,
    epoch: usize,
    learning_rate: Option<f64>,
    has_optimizer: bool,
}

/// Everything restored from a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub state: Option<TrainState>,
}

fn put_f64s(out: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model, state: Option<&TrainState>) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        relations: model.relations.clone(),
        seed: model.seed,
        step: state.map_or(0, |s| s.step),
        epoch: state.map_or(0, |s| s.epoch),
        learning_rate: state.map(|s| s.optimizer.lr),
        has_optimizer: state.is_some(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, p) in model.store.iter() {
        out.write_all(&(p.name.len() as u16).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &s in shape {
            out.write_all(&(s as u32).to_le_bytes())?;
        }
        put_f64s(&mut out, p.value.data())?;
    }
    if let Some(s) = state {
        for a in s.optimizer.states() {
            out.write_all(&a.step_count.to_le_bytes())?;
            put_f64s(&mut out, a.m.data())?;
            put_f64s(&mut out, a.v.data())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::integrity(self.path, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::integrity(self.path, "absurd tensor size"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, at: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::integrity(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::integrity(path, format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::integrity(path, "parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let value = Tensor::new(shape, r.f64s(n)?).map_err(|e| Error::integrity(path, e.to_string()))?;
        params.push((name, value));
    }
    let mut model = Model::new(header.config, header.vocab, header.relations, header.seed)?;
    model.store.load_values(&params)?;
    let state = if header.has_optimizer {
        let mut states = Vec::with_capacity(count);
        for (_, value) in &params {
            let mut s = AdamState::new(value.shape());
            s.step_count = r.u64()?;
            s.m = Tensor::new(value.shape().to_vec(), r.f64s(value.len())?)?;
            s.v = Tensor::new(value.shape().to_vec(), r.f64s(value.len())?)?;
            states.push(s);
        }
        Some(TrainState {
            optimizer: Adam::from_states(header.learning_rate.unwrap_or(0.0), states),
            step: header.step,
            epoch: header.epoch,
        })
    } else {
        None
    };
    if r.at != bytes.len() {
        return Err(Error::integrity(path, "trailing bytes after checkpoint payload"));
    }
    Ok(Checkpoint { model, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_corpus};
    use crate::model::{train, TrainConfig};

    #[test]
    fn round_trip_restores_parameters_and_optimizer() {
        let corpus = tiny_corpus();
        let mut model = Model::for_corpus(tiny_config("h1,h3,decoder"), &corpus, 3).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: Some(4), ..TrainConfig::default() };
        let out = train(&mut model, &corpus, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, Some(&out.state)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model.param_values(), model.param_values());
        let st = back.state.unwrap();
        assert_eq!((st.step, st.epoch), (2, 1));
        assert_eq!(st.optimizer.states(), out.state.optimizer.states());
        assert_eq!(back.model.forward(&corpus.instances[1]).unwrap(), model.forward(&corpus.instances[1]).unwrap());
        // Saving the restored model reproduces the file byte for byte.
        let again = dir.path().join("again.ckpt");
        save_checkpoint(&again, &back.model, Some(&st)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let corpus = tiny_corpus();
        let model = Model::for_corpus(tiny_config("h3"), &corpus, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity { .. })));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity { .. })));
    }
}
