//! Checkpoint container: little-endian binary, magic `SEGW`, u32 version 1,
//! u32 tensor count, then per tensor a u16 name length, UTF-8 name, u8 rank,
//! u64 dims and row-major IEEE-754 f32 data, closed by a CRC32 of the
//! payload (everything after the version field).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, WeightStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SEGW";
const VERSION: u32 = 1;

/// Standard IEEE CRC32 (reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub fn save_weights(path: &Path, store: &WeightStore<f32>) -> Result<()> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
        payload.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        payload.extend_from_slice(name_bytes);
        payload.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
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

/// Parse a checkpoint file without shape validation.
pub fn read_weight_file(path: &Path) -> Result<WeightStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version, VERSION));
    }
    if bytes.len() < r.pos + 4 {
        return Err(Error::CheckpointTruncated("checksum".into()));
    }
    let payload = &bytes[r.pos..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(payload);
    if stored != computed {
        return Err(Error::CheckpointChecksum { stored, computed });
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let count = r.u32("tensor count")?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::CheckpointTruncated("tensor name (invalid UTF-8)".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("data of {name}"))?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(name, Tensor::new(shape, data));
    }
    if r.pos != payload.len() {
        return Err(Error::CheckpointTruncated("trailing bytes after tensors".into()));
    }
    Ok(store)
}

/// Parse and validate every tensor's shape against `cfg` before returning.
pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<WeightStore<f32>> {
    let store = read_weight_file(path)?;
    store.validate(cfg)?;
    Ok(store)
}
