//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `STSNCKPT`, a little-endian `u32` format
//! version, a `u64` header length and a JSON header (config, vocabularies,
//! counters, parameter names and shapes), then every parameter as raw
//! little-endian `f64`, then the optimizer moments when present, and finally
//! an FNV-1a `u64` checksum of all preceding bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::Vocabularies;
use crate::encoder::PrecomputedEncoder;
use crate::model::StsnModel;
use crate::optim::AdamW;
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STSNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: Config,
    vocabs: Vocabularies,
    epoch: usize,
    step: u64,
    params: Vec<(String, usize, usize)>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub vocabs: Vocabularies,
    pub epoch: usize,
    pub step: u64,
    pub params: Vec<(String, Matrix)>,
    pub optimizer: Option<AdamW>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("absurd shape for {what}")))?;
        let raw = self.take(len, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Matrix::new(rows, cols, data))
    }
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_model(model: &StsnModel, optimizer: Option<&AdamW>, epoch: usize, step: u64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocabs: model.vocabs.clone(),
            epoch,
            step,
            params: model.store.iter().map(|(_, name, m)| (name.to_string(), m.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            vocabs: self.vocabs.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.params.iter().map(|(n, m)| (n.clone(), m.rows(), m.cols())).collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.params {
            push_matrix(&mut out, m);
        }
        if let Some(opt) = &self.optimizer {
            for m in opt.m.iter().chain(&opt.v) {
                push_matrix(&mut out, m);
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::CorruptCheckpoint("missing STSNCKPT magic".into()));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < r.pos + 8 {
            return Err(Error::CorruptCheckpoint("truncated before checksum".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let header_len = usize::try_from(r.u64("header length")?)
            .map_err(|_| Error::CorruptCheckpoint("header length overflows".into()))?;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
        let mut params = Vec::with_capacity(header.params.len());
        for (name, rows, cols) in &header.params {
            params.push((name.clone(), r.matrix(*rows, *cols, name)?));
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let mut read_all = |what: &str| -> Result<Vec<Matrix>> {
                    header.params.iter().map(|(_, rows, cols)| r.matrix(*rows, *cols, what)).collect()
                };
                let m = read_all("first moments")?;
                let v = read_all("second moments")?;
                Some(AdamW {
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    weight_decay: h.weight_decay,
                    step: h.step,
                    m,
                    v,
                })
            }
        };
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            config: header.config,
            vocabs: header.vocabs,
            epoch: header.epoch,
            step: header.step,
            params,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model, reading precomputed features from the configured path.
    pub fn into_model(self) -> Result<(StsnModel, Option<AdamW>)> {
        let model = StsnModel::new(self.config.clone(), self.vocabs.clone())?;
        self.restore(model)
    }

    pub fn into_model_with_features(self, features: Option<PrecomputedEncoder>) -> Result<(StsnModel, Option<AdamW>)> {
        let model = StsnModel::with_features(self.config.clone(), self.vocabs.clone(), features)?;
        self.restore(model)
    }

    fn restore(self, mut model: StsnModel) -> Result<(StsnModel, Option<AdamW>)> {
        if model.store.len() != self.params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint has {} parameters, the configured model {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in self.params {
            let id = model
                .store
                .id_of(&name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected parameter {name}")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok((model, self.optimizer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabularies, synthetic_corpus, SyntheticConfig};

    fn model() -> StsnModel {
        let corpus = synthetic_corpus(&SyntheticConfig::default());
        let mut c = Config::default();
        for (k, v) in [
            ("encoder.dim", "8"),
            ("encoder.vocab_buckets", "32"),
            ("encoder.max_positions", "64"),
            ("stack.layers", "1"),
            ("stack.heads", "2"),
            ("decoder.label_dim", "3"),
            ("decoder.width_dim", "3"),
        ] {
            c.set(k, v).unwrap();
        }
        StsnModel::new(c, build_vocabularies(&corpus).unwrap()).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let m = model();
        let opt = AdamW::new(&m.store, 0.01);
        let ck = Checkpoint::from_model(&m, Some(&opt), 3, 17);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = model();
        let bytes = Checkpoint::from_model(&m, None, 0, 0).to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::CorruptCheckpoint(_))
        ));
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut versioned = bytes.clone();
        versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&versioned),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn save_load_restores_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        Checkpoint::from_model(&m, None, 1, 2).save(&path).unwrap();
        assert!(!dir.path().join("model.ckpt.tmp").exists());
        let (back, opt) = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert!(opt.is_none());
        for (id, name, value) in m.store.iter() {
            assert_eq!(back.store.name(id), name);
            assert_eq!(back.store.get(id), value);
        }
    }
}
