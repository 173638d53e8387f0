//! Binary checkpoints.
//!
//! ```text
//! magic "FRSCKPT" | version u8 | meta_len u32 | meta (JSON, UTF-8)
//! count u32 | count × { name_len u32 | name | rows u32 | cols u32 | rows·cols f64 }
//! ```
//! Integers and floats are little-endian.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Mat, ParamStore};

pub const MAGIC: &[u8; 7] = b"FRSCKPT";
pub const VERSION: u8 = 1;

pub fn encode<M: Serialize>(meta: &M, store: &ParamStore) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(16 + meta.len() + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&len_u32(store.len())?.to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&len_u32(p.name.len())?.to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let (r, c) = p.value.dim();
        out.extend_from_slice(&len_u32(r)?.to_le_bytes());
        out.extend_from_slice(&len_u32(c)?.to_le_bytes());
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit the format")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Metadata and named tensors, in file order.
pub fn decode<M: DeserializeOwned>(buf: &[u8]) -> Result<(M, Vec<(String, Mat)>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()?;
    let meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()?;
        let cols = r.u32()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let data: Vec<f64> = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Mat::from_shape_vec((rows, cols), data).expect("shape matches data")));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok((meta, tensors))
}

/// Copies tensors into `store`, which must hold exactly the same names and
/// shapes.
pub fn load_into(store: &mut ParamStore, tensors: Vec<(String, Mat)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, value) in tensors {
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{name}`")))?;
        if store.value(id).dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                store.value(id).dim(),
                value.dim()
            )));
        }
        *store.value_mut(id) = value;
    }
    Ok(())
}

pub fn save<M: Serialize>(path: &Path, meta: &M, store: &ParamStore) -> Result<()> {
    let bytes = encode(meta, store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<(String, Mat)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
