//! Binary checkpoint format.
//!
//! ```text
//! "MCAW" | u32 version | u32 entry count
//! per entry: u32 name length | name (UTF-8) | u32 rank | u64 × rank dims
//!            | u8 dtype | payload
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! dtype 0 is little-endian f32. dtype 1 is raw bytes and is used only for
//! the `__config__` entry, which stores the variant spec as JSON. All
//! integers are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{McaNet, VariantSpec};

pub const MAGIC: &[u8; 4] = b"MCAW";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "__config__";
const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// JSON-encoded [`VariantSpec`].
    pub config: Option<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &McaNet) -> Result<Checkpoint> {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                dims: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Ok(Checkpoint { config: Some(serde_json::to_string(&model.spec)?), tensors })
    }

    pub fn variant(&self) -> Result<VariantSpec> {
        let json = self
            .config
            .as_deref()
            .ok_or_else(|| Error::Checkpoint(format!("missing {CONFIG_ENTRY} entry")))?;
        serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("bad {CONFIG_ENTRY} entry: {e}")))
    }

    /// Copies stored values into `model`; names and shapes must match
    /// exactly.
    pub fn apply_to(&self, model: &McaNet) -> Result<()> {
        let params = model.named_params();
        if params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for ((name, p), stored) in params.iter().zip(&self.tensors) {
            if *name != stored.name || p.shape() != stored.dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model parameter {name} {:?}",
                    stored.name,
                    stored.dims,
                    p.shape()
                )));
            }
        }
        for ((_, p), stored) in params.iter().zip(&self.tensors) {
            p.update(|w| w.iter_mut().zip(&stored.values).for_each(|(w, &v)| *w = v as f64));
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config.
    pub fn build_model(&self) -> Result<McaNet> {
        let model = McaNet::new(&self.variant()?, 0)?;
        self.apply_to(&model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if t.name == CONFIG_ENTRY || !seen.insert(t.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {:?}", t.name)));
            }
            if t.dims.iter().product::<usize>() != t.values.len() {
                return Err(Error::Checkpoint(format!("tensor {} values do not fill {:?}", t.name, t.dims)));
            }
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let count = self.tensors.len() + usize::from(self.config.is_some());
        buf.extend_from_slice(&(count as u32).to_le_bytes());
        let header = |buf: &mut Vec<u8>, name: &str, dims: &[usize], dtype: u8| {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.push(dtype);
        };
        if let Some(cfg) = &self.config {
            header(&mut buf, CONFIG_ENTRY, &[cfg.len()], DTYPE_BYTES);
            buf.extend_from_slice(cfg.as_bytes());
        }
        for t in &self.tensors {
            header(&mut buf, &t.name, &t.dims, DTYPE_F32);
            for v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        if &body[..4] != MAGIC {
            return Err(Error::Checkpoint("missing MCAW magic".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::default();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("extents of {name} overflow")))?;
            match r.u8()? {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
                    let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    ckpt.tensors.push(NamedTensor { name, dims, values });
                }
                DTYPE_BYTES if name == CONFIG_ENTRY && rank == 1 => {
                    let raw = r.take(n)?;
                    ckpt.config = Some(
                        String::from_utf8(raw.to_vec())
                            .map_err(|_| Error::Checkpoint(format!("{CONFIG_ENTRY} is not UTF-8")))?,
                    );
                }
                tag => return Err(Error::Checkpoint(format!("unsupported dtype {tag} for {name}"))),
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
