//! Binary checkpoint: an 8-byte magic, a little-endian `u32` version, a
//! `u64` header length, a JSON header, then raw little-endian `f64` payloads
//! for every parameter array followed by optimizer moments when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_shapes, ArchConfig, ModelParams};
use crate::numerics::{AdamW, AdamWConfig, DenseArray};

const MAGIC: &[u8; 8] = b"MAMPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus the state needed to resume or audit a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: ModelParams<DenseArray>,
    pub optimizer: Option<AdamW>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Data(format!("{}: checkpoint truncated at byte {}", self.path.display(), self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array(&mut self, shape: &[usize]) -> Result<DenseArray> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        DenseArray::new(shape.to_vec(), data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arch: self.arch.clone(),
            seed: self.seed,
            step: self.step,
            tensors: self
                .params
                .map(|name, a| TensorEntry {
                    name: name.to_string(),
                    shape: a.shape().to_vec(),
                })
                .into_vec(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 24 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.params.values() {
            out.extend_from_slice(&a.to_le_bytes());
        }
        if let Some(o) = &self.optimizer {
            for a in o.first_moment.iter().chain(&o.second_moment) {
                out.extend_from_slice(&a.to_le_bytes());
            }
        }
        out
    }

    /// Parses checkpoint bytes; `path` only labels error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("corrupt header: {e}")))?;
        header.arch.validate()?;

        let expected = param_shapes(&header.arch);
        let names = expected.names();
        let listed: Vec<(&str, &[usize])> =
            header.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice())).collect();
        let wanted: Vec<(&str, &[usize])> = names
            .iter()
            .map(String::as_str)
            .zip(expected.values().into_iter().map(Vec::as_slice))
            .collect();
        if listed != wanted {
            return Err(bad("tensor table does not match the architecture".into()));
        }
        let params = expected.try_map(|_, shape| r.array(shape))?;
        let optimizer = match header.optimizer {
            Some(o) => {
                let shapes = expected.values();
                let first = shapes.iter().map(|s| r.array(s)).collect::<Result<Vec<_>>>()?;
                let second = shapes.iter().map(|s| r.array(s)).collect::<Result<Vec<_>>>()?;
                Some(AdamW {
                    config: o.config,
                    first_moment: first,
                    second_moment: second,
                    step: o.step,
                })
            }
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            arch: header.arch,
            seed: header.seed,
            step: header.step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample(with_optimizer: bool) -> Checkpoint {
        let arch = ArchConfig {
            decoder_dim: 8,
            mask_ratio: 0.3,
            ..ArchConfig::toy()
        };
        let params = init_params(&arch, 9);
        let optimizer = with_optimizer.then(|| {
            let shapes = param_shapes(&arch);
            let mut o = AdamW::new(AdamWConfig::default(), shapes.values().into_iter().map(Vec::as_slice));
            o.step = 17;
            o.first_moment[3].data_mut()[0] = 1.0 / 3.0;
            o.second_moment[5].data_mut()[1] = std::f64::consts::PI;
            o
        });
        Checkpoint {
            arch,
            seed: 42,
            step: 17,
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for with_opt in [false, true] {
            let ck = sample(with_opt);
            let path = dir.path().join("model.ckpt");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), ck.to_bytes());
            assert_eq!(back.params.digest(), ck.params.digest());
        }
    }

    #[test]
    fn corrupt_files_are_data_errors() {
        let bytes = sample(true).to_bytes();
        let p = Path::new("x.ckpt");
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p), Err(Error::Data(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra, p), Err(Error::Data(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic, p), Err(Error::Data(_))));
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version, p).unwrap_err().to_string().contains("version"));
    }
}
