//! Single-file parameter container.
//!
//! Layout (little endian): magic `GAINCKPT`, `u64` version, `u64` entry count,
//! then per entry `u64` name length, UTF-8 name, `u64` offset and `u64` length
//! of its blob relative to the start of the blob region, then the blobs, each a
//! tensor in the binary tensor layout.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{io, Tensor};

pub const MAGIC: &[u8; 8] = b"GAINCKPT";
pub const VERSION: u64 = 1;
const MAX_NAME: u64 = 4096;

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let blobs: Vec<Vec<u8>> = store.ids().map(|id| io::to_bytes(store.get(id))).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (id, blob) in store.ids().zip(&blobs) {
        let name = store.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        offset += blob.len() as u64;
    }
    for blob in &blobs {
        out.extend_from_slice(blob);
    }
    out
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(store))?;
    Ok(())
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}

/// Decodes every `(name, tensor)` entry in file order.
pub fn read_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = bytes;
    if r.len() < 8 || &r[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    r = &r[8..];
    let version = read_u64(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)?;
        if len > MAX_NAME || len as usize > r.len() {
            return Err(Error::Checkpoint("corrupt manifest".into()));
        }
        let name = std::str::from_utf8(&r[..len as usize])
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        r = &r[len as usize..];
        let offset = read_u64(&mut r)?;
        let size = read_u64(&mut r)?;
        manifest.push((name, offset, size));
    }
    let blobs = r;
    manifest
        .into_iter()
        .map(|(name, offset, size)| {
            let end = offset.checked_add(size).filter(|&e| e <= blobs.len() as u64);
            let end = end.ok_or_else(|| Error::Checkpoint(format!("blob of `{name}` lies outside the file")))?;
            let t = io::from_bytes(&blobs[offset as usize..end as usize])
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            Ok((name, t))
        })
        .collect()
}

/// Overwrites every tensor of `store` with the checkpointed value. The
/// checkpoint must hold exactly the store's names with matching shapes.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let entries = read_entries(bytes)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    load_into(store, &fs::read(path)?)
}
