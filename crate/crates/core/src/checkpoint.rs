//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"XMGN"
//! version u32          (currently 1)
//! fprint  u64          config fingerprint; loaders refuse mismatches
//! step    u64          training step the snapshot was taken at
//! count   u32          number of entries
//! entry*  name_len u16, name bytes, ndim u8, dims u32 * ndim, data f64 * numel
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, XmError};
use crate::nn::Module;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"XMGN";
const VERSION: u32 = 1;

/// First eight bytes of SHA-256 over a canonical config string.
pub fn fingerprint(config: &str) -> u64 {
    let digest = Sha256::digest(config.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub step: u64,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.fingerprint.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&(ckpt.entries.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(XmError::Parse {
                path: self.path.clone(),
                offset: self.pos,
                msg: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path: path.to_string() };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(XmError::Parse {
            path: path.to_string(),
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(XmError::Parse {
            path: path.to_string(),
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let fingerprint = r.u64("fingerprint")?;
    let step = r.u64("step")?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16(&format!("entry {i} name length"))? as usize;
        let name = String::from_utf8(r.take(name_len, "entry name")?.to_vec()).map_err(|_| {
            XmError::Parse {
                path: path.to_string(),
                offset: r.pos,
                msg: format!("entry {i} name is not UTF-8"),
            }
        })?;
        let ndim = r.take(1, "entry rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("entry dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &format!("data of {name}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::from_vec(shape, data)));
    }
    Ok(Checkpoint { fingerprint, step, entries })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt)).map_err(|e| XmError::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| XmError::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}

/// Snapshot every parameter (learnable and state) of a module.
pub fn entries_of(model: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    model.visit(&mut |p, _| out.push((p.name.clone(), p.value.clone())));
    out
}

/// Write checkpoint entries back into a module; every parameter must be
/// present with a matching shape.
pub fn restore_into(model: &mut dyn Module, ckpt: &Checkpoint) -> Result<()> {
    let mut missing = Vec::new();
    model.visit_mut(&mut |p, _| match ckpt.get(&p.name) {
        Some(t) if t.shape == p.value.shape => {
            p.value.data.clone_from(&t.data);
        }
        Some(t) => missing.push(format!("{} has shape {:?}, expected {:?}", p.name, t.shape, p.value.shape)),
        None => missing.push(format!("{} absent from checkpoint", p.name)),
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(XmError::Checkpoint(missing.join("; ")))
    }
}
