//! Weight file layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CAMOWT01"
//! u32              length of the config fingerprint, then that many UTF-8 bytes
//!                  (the `key = value` text of the detector config)
//! u32              tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, then rank × u64 extents
//!   product(extents) × f32 values, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::config::DetectorConfig;
use super::model::DetectorWeights;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const MAGIC: &[u8; 8] = b"CAMOWT01";

pub fn encode_weights(w: &DetectorWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let fp = w.config.fingerprint();
    out.extend_from_slice(&(fp.len() as u32).to_le_bytes());
    out.extend_from_slice(fp.as_bytes());
    out.extend_from_slice(&(w.tensors.len() as u32).to_le_bytes());
    for (name, t) in &w.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

pub fn decode_weights(bytes: &[u8]) -> std::result::Result<DetectorWeights, String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("not a weight file (bad magic)".into());
    }
    let fp = c.string()?;
    let kv = KeyValues::parse(&fp).map_err(|e| e.to_string())?;
    let config = DetectorConfig::from_kv(&kv).map_err(|e| e.to_string())?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    let w = DetectorWeights { config, tensors };
    w.check_shapes().map_err(|e| e.to_string())?;
    Ok(w)
}

pub fn save_weights(w: &DetectorWeights, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::File::create(path)?.write_all(&encode_weights(w))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<DetectorWeights> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::input(path, e))?
        .read_to_end(&mut bytes)?;
    decode_weights(&bytes).map_err(|e| Error::input(path, e))
}
