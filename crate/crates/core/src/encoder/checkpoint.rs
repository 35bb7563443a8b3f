//! Binary checkpoint format.
//!
//! ```text
//! "CRBO"  version:u32
//! n_layers n_heads d_e mlp_dim patch_len mechanism c_max np_max : u32 each
//! drop_path_rate:f32
//! repeated until EOF:
//!   name_len:u16  name:utf8  rank:u8  dims:u32*rank  data:f32*prod(dims)
//! ```
//!
//! All integers and floats are little-endian. Blobs whose names start with
//! `opt.` or `train.` carry optimizer and loop state rather than weights.

use std::path::Path;

use crate::attention::Mechanism;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Encoder, EncoderConfig, HeadKind};

pub const MAGIC: &[u8; 4] = b"CRBO";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub blobs: Vec<(String, Tensor<f32>)>,
}

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("{name} {v} does not fit the checkpoint header")))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, v) in [
            ("n_layers", c.n_layers),
            ("n_heads", c.n_heads),
            ("d_e", c.d_e),
            ("mlp_dim", c.mlp_dim),
            ("patch_len", c.patch_len),
            ("mechanism", c.mechanism.code() as usize),
            ("c_max", c.c_max),
            ("np_max", c.np_max),
        ] {
            out.extend_from_slice(&u32_field(name, v)?.to_le_bytes());
        }
        out.extend_from_slice(&(c.drop_path_rate as f32).to_le_bytes());
        for (name, t) in &self.blobs {
            let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("blob name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::config(format!("rank of {name} exceeds 255")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&u32_field("dimension", d)?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u32()?;
        if version == 0 || version > VERSION {
            return Err(Error::UnsupportedVersion {
                format: "checkpoint",
                found: version,
                supported: VERSION,
            });
        }
        let mut fields = [0usize; 8];
        for f in &mut fields {
            *f = r.u32()? as usize;
        }
        let mechanism_at = r.pos - 4 * 3;
        let mechanism = Mechanism::from_code(fields[5] as u32).map_err(|e| Error::Format {
            offset: mechanism_at as u64,
            reason: e.to_string(),
        })?;
        let config = EncoderConfig {
            n_layers: fields[0],
            n_heads: fields[1],
            d_e: fields[2],
            mlp_dim: fields[3],
            patch_len: fields[4],
            mechanism,
            c_max: fields[6],
            np_max: fields[7],
            drop_path_rate: f64::from(r.f32()?),
        };
        let mut blobs = Vec::new();
        while r.pos < bytes.len() {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format {
                    offset: (at + 2) as u64,
                    reason: format!("blob name is not UTF-8: {e}"),
                })?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let data_at = r.pos;
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Format {
                offset: data_at as u64,
                reason: format!("blob {name}: {e}"),
            })?;
            blobs.push((name, t));
        }
        Ok(Self { config, blobs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
}

fn is_state_blob(name: &str) -> bool {
    name.starts_with("opt.") || name.starts_with("train.")
}

impl<T: Scalar> Encoder<T> {
    /// Snapshot of the weights, followed by `extra` state blobs.
    pub fn to_checkpoint(&self, extra: Vec<(String, Tensor<f32>)>) -> Checkpoint {
        let mut blobs: Vec<(String, Tensor<f32>)> = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.cast()))
            .collect();
        blobs.extend(extra);
        Checkpoint {
            config: self.config.clone(),
            blobs,
        }
    }

    /// Rebuilds an encoder (and head, if present) from a checkpoint. Returns
    /// the state blobs that are not weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vec<(String, Tensor<f32>)>)> {
        let mut enc = Self::build(ck.config.clone(), 0)?;
        for kind in [HeadKind::Classification, HeadKind::Regression] {
            if let Some(w) = ck.get(&format!("{}.weight", kind.prefix())) {
                enc.attach_head(kind, *w.shape().last().unwrap_or(&1), 0)?;
            }
        }
        let mut extra = Vec::new();
        let mut seen = vec![false; enc.store.len()];
        for (name, t) in &ck.blobs {
            if is_state_blob(name) {
                extra.push((name.clone(), t.clone()));
                continue;
            }
            let id = enc
                .store
                .find(name)
                .ok_or_else(|| Error::contract(format!("checkpoint has unknown parameter {name}")))?;
            enc.store.assign(name, t.cast())?;
            seen[id.0] = true;
        }
        if let Some(missing) = enc.store.ids().find(|id| !seen[id.0]) {
            return Err(Error::contract(format!(
                "checkpoint is missing parameter {}",
                enc.store.entry(missing).name
            )));
        }
        Ok((enc, extra))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint(Vec::new()).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?)?.0)
    }
}
