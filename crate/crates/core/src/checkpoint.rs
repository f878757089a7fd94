//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SNLSDCKP"
//! version   u32      FORMAT_VERSION
//! header    u64 length, then UTF-8 JSON:
//!           { config, config_digest, vocab, epoch, metrics, optimizer }
//! tensors   u32 count, then per tensor:
//!           u32 name length, name, u32 rank, u64 per dim, f64 per value
//! optimizer u32 count, then per array: u64 length, f64 per value
//! digest    32 bytes SHA-256 of everything above
//! ```
//!
//! `config_digest` is the SHA-256 of the canonical JSON of the config.
//! Optimizer arrays are the first-moment (or squared-gradient) arrays of
//! every parameter in store order, followed by the second ones.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{random_table, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::EpochRecord;

pub const MAGIC: &[u8; 8] = b"SNLSDCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub metrics: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimizerConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_digest: String,
    vocab: Vec<String>,
    epoch: usize,
    metrics: Vec<EpochRecord>,
    optimizer: Option<OptimizerHeader>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_digest(cfg: &RunConfig) -> String {
    hex(&Sha256::digest(cfg.to_json().as_bytes()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflows".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        vocab: &Vocab,
        optimizer: Option<&Optimizer>,
        epoch: usize,
        metrics: &[EpochRecord],
    ) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocab: vocab.clone(),
            params: model.store.clone(),
            optimizer: optimizer.map(Optimizer::export),
            epoch,
            metrics: metrics.to_vec(),
        }
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let placeholder = random_table(self.vocab.len(), self.config.d_emb, 0);
        let mut model = Model::new(&self.config, placeholder)?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }

    pub fn restore_optimizer(&self) -> Result<Option<Optimizer>> {
        self.optimizer
            .clone()
            .map(|s| Optimizer::import(&self.params, s))
            .transpose()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            config_digest: config_digest(&self.config),
            vocab: self.vocab.ordinary_tokens().to_vec(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        let arrays: Vec<&Vec<f64>> = self
            .optimizer
            .iter()
            .flat_map(|o| o.first.iter().chain(&o.second))
            .collect();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            put_f64s(&mut out, a);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 32 || &buf[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("digest mismatch (file corrupted or truncated)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = r.len()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.config_digest != config_digest(&header.config) {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let t = Tensor::new(shape, r.f64s(n)?)?;
            if params.find(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.add(name, t);
        }
        let n_arrays = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let n = r.len()?;
            arrays.push(r.f64s(n)?);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                if arrays.len() != 2 * params.len() {
                    return Err(Error::Checkpoint("optimizer arrays do not match the parameters".into()));
                }
                let second = arrays.split_off(params.len());
                Some(OptimizerState {
                    config: h.config,
                    step: h.step,
                    first: arrays,
                    second,
                })
            }
            None if arrays.is_empty() => None,
            None => return Err(Error::Checkpoint("optimizer arrays without optimizer header".into())),
        };
        Ok(Checkpoint {
            config: header.config,
            vocab: Vocab::from_tokens(header.vocab),
            params,
            optimizer,
            epoch: header.epoch,
            metrics: header.metrics,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
