//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DPNCKPT\0"
//! version    u32
//! header     u64 byte length, then UTF-8 JSON (object with a "model" key)
//! count      u64 number of tensors
//! tensor     u32 name length, name bytes,
//!            u32 rank, rank x u64 dims,
//!            prod(dims) x f32 data
//! ```
//!
//! Model parameters use their hierarchical names (`encoder.cnn.0.filter`);
//! optimizer state lives under `optim/`.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use super::{Dpn, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 8] = *b"DPNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Map<String, Value>,
    pub tensors: Vec<NamedTensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.at)))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| bad("length overflow"))
    }
}

impl Checkpoint {
    pub fn new(header: Map<String, Value>) -> Self {
        Checkpoint {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.as_f64() as f32).collect(),
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON map serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = r.u64()?;
        let header: Value = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("header: {e}")))?;
        let Value::Object(header) = header else {
            return Err(bad("header is not a JSON object"));
        };
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.at != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.at)));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self.header.get("model").ok_or_else(|| bad("header has no model config"))?;
        serde_json::from_value(v.clone()).map_err(|e| bad(format!("model config does not match this build: {e}")))
    }
}

impl<T: Scalar> Dpn<T> {
    /// Checkpoint holding the config and every parameter (as f32).
    pub fn to_checkpoint(&self, mut header: Map<String, Value>) -> Checkpoint {
        header.insert("model".into(), serde_json::to_value(self.config()).expect("config serializes"));
        let mut ck = Checkpoint::new(header);
        for (name, t) in self.params.iter() {
            ck.push(name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Dpn::new(ck.model_config()?, 0)?;
        model.load_params(ck)?;
        Ok(model)
    }

    /// Overwrites every parameter with the same-named checkpoint tensor.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let t = ck.tensor(&name).ok_or_else(|| bad(format!("missing parameter {name}")))?;
            let value = Tensor::from_vec(t.shape.clone(), t.data.iter().map(|&x| T::cast(x as f64)).collect())
                .map_err(|_| bad(format!("{name}: data does not match shape")))?;
            self.params
                .set(id, value)
                .map_err(|_| bad(format!("{name}: shape {:?} does not match the model", t.shape)))?;
        }
        let unknown: Vec<&str> = ck
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .filter(|n| !n.starts_with("optim/") && self.params.id(n).is_none())
            .collect();
        if !unknown.is_empty() {
            return Err(bad(format!("unknown tensors {unknown:?}")));
        }
        Ok(())
    }
}
