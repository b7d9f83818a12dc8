//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MCRNET1"
//! u32 config length, config text (RunConfig key = value lines)
//! u64 training step
//! u64 seed
//! u32 parameter count, then per parameter:
//!   u32 name length, name, u32 rank, u64 dims…, f32 values (row-major)
//! ```
//!
//! The vocabulary lives beside the checkpoint as `vocab.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::model::McrNet;
use crate::tensor::{Rng, Tensor};

pub const MAGIC: &[u8; 7] = b"MCRNET1";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(net: &McrNet, config: &RunConfig, step: u64) -> Self {
        Checkpoint {
            config: config.clone(),
            step,
            seed: config.seed,
            params: net
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint(
                "bad magic; not an MCRNET1 checkpoint".into(),
            ));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
        let config = RunConfig::from_text(text)?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            step,
            seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the network; every model parameter must appear exactly once
    /// with its expected shape.
    pub fn into_model(self, vocab_size: usize) -> Result<(McrNet, RunConfig)> {
        let mut net = McrNet::new(
            self.config.model_config(vocab_size)?,
            &mut Rng::new(self.seed),
        )?;
        if net.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                net.store.len()
            )));
        }
        let mut seen = vec![false; net.store.len()];
        for (name, value) in self.params {
            let id = net
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} appears twice"
                )));
            }
            let slot = net.store.get_mut(id);
            if slot.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        Ok((net, self.config))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name(VOCAB_FILE)
}

/// Writes the checkpoint and its vocabulary.
pub fn save_model(
    path: &Path,
    net: &McrNet,
    config: &RunConfig,
    step: u64,
    vocab: &Vocab,
) -> Result<()> {
    Checkpoint::from_model(net, config, step).save(path)?;
    vocab.save(&vocab_path(path))
}

/// Loads a checkpoint and the vocabulary beside it.
pub fn load_model(path: &Path) -> Result<(McrNet, RunConfig, Vocab)> {
    let vocab = Vocab::load(&vocab_path(path))?;
    let (net, config) = Checkpoint::load(path)?.into_model(vocab.len())?;
    Ok((net, config, vocab))
}
