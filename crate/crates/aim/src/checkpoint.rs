//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AIMC"  u32 version  u32 entry_count
//! per entry, in name order:
//!     u32 name_len  name (UTF-8)  u8 dtype (0 = f32, 1 = f64)  u8 rank
//!     u64 extent * rank  u64 offset (bytes, from the start of the payload)
//! payload: every tensor's elements back to back, in entry order
//! ```

use std::fs;
use std::path::Path;

use aim_core::{DType, Element, ParamStore, Tensor};

use crate::{AimError, Result};

pub const MAGIC: &[u8; 4] = b"AIMC";
pub const VERSION: u32 = 1;

pub fn encode<E: Element>(store: &ParamStore<E>) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in store.iter() {
        head.extend_from_slice(&(name.len() as u32).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.push(E::DTYPE.tag());
        head.push(t.rank() as u8);
        for &d in t.shape() {
            head.extend_from_slice(&(d as u64).to_le_bytes());
        }
        head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &v in t.data() {
            match E::DTYPE {
                DType::F32 => payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    head.extend_from_slice(&payload);
    head
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(AimError::Checkpoint(format!("truncated while reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Parses a checkpoint whose tensors are stored as `E`.
pub fn decode<E: Element>(bytes: &[u8]) -> Result<ParamStore<E>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(AimError::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(AimError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries: Vec<Entry> = Vec::new();
    let mut expected_offset = 0usize;
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| AimError::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| AimError::Checkpoint(format!("unknown dtype tag {tag}")))?;
        if dtype != E::DTYPE {
            return Err(AimError::Checkpoint(format!(
                "`{name}` stored as {dtype:?}, expected {:?}",
                E::DTYPE
            )));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let offset = r.u64("offset")? as usize;
        if offset != expected_offset {
            return Err(AimError::Checkpoint(format!("`{name}` payload offset {offset}, expected {expected_offset}")));
        }
        if let Some(prev) = entries.last() {
            if prev.name >= name {
                return Err(AimError::Checkpoint(format!("entries out of order or duplicated at `{name}`")));
            }
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| AimError::Checkpoint(format!("`{name}` is too large")))?;
        expected_offset = numel
            .checked_mul(dtype.size())
            .and_then(|b| b.checked_add(expected_offset))
            .ok_or_else(|| AimError::Checkpoint(format!("`{name}` is too large")))?;
        entries.push(Entry { name, shape, offset });
    }
    let payload = &bytes[r.pos..];
    if payload.len() != expected_offset {
        return Err(AimError::Checkpoint(format!(
            "payload holds {} bytes, header describes {expected_offset}",
            payload.len()
        )));
    }
    let mut store = ParamStore::new();
    let size = E::DTYPE.size();
    for e in entries {
        let numel: usize = e.shape.iter().product();
        let raw = &payload[e.offset..e.offset + numel * size];
        let data: Vec<E> = raw
            .chunks_exact(size)
            .map(|c| match E::DTYPE {
                DType::F32 => E::of(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                DType::F64 => E::of(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| AimError::Checkpoint(format!("`{}`: {err}", e.name)))?;
        store.insert(e.name, t);
    }
    Ok(store)
}

pub fn save<E: Element>(path: &Path, store: &ParamStore<E>) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load<E: Element>(path: &Path) -> Result<ParamStore<E>> {
    decode(&fs::read(path)?)
}

/// Writes only the named tensors, e.g. the tunable partition.
pub fn save_subset<'n, E: Element>(
    path: &Path,
    store: &ParamStore<E>,
    names: impl IntoIterator<Item = &'n str>,
) -> Result<()> {
    save(path, &store.subset(names))
}
