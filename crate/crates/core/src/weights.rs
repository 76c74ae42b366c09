//! DCW1 tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCW1"  u32 version  u32 count
//! count x { u32 id_len, id (utf-8), u8 dtype, u8 flags, u8 rank, rank x u32 dim, f32 payload }
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! `dtype` is 0 for float32. `flags` bit 0 marks a trainable parameter, bit
//! 1 a buffer (moving statistics). Model files list trainables first, then
//! everything else, in registry order. The trailing digest doubles as the
//! model fingerprint.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DCW1";
pub const VERSION: u32 = 1;
pub const DIGEST_LEN: usize = 32;

const DTYPE_F32: u8 = 0;
pub const FLAG_TRAINABLE: u8 = 1;
pub const FLAG_BUFFER: u8 = 2;

/// One tensor of a DCW1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub flags: u8,
    pub tensor: Tensor,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let payload: usize = records
        .iter()
        .map(|r| 4 + r.id.len() + 3 + 4 * r.tensor.dims().len() + 4 * r.tensor.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.push(DTYPE_F32);
        out.push(r.flags);
        out.push(r.tensor.dims().len() as u8);
        for &d in r.tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse and verify a DCW1 byte stream.
///
/// Structure is checked before the digest, so a short file reports
/// [`Error::Truncated`] and a corrupted one [`Error::ChecksumMismatch`].
pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Truncated);
    }
    let body = &bytes[..bytes.len() - DIGEST_LEN];
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::ChecksumMismatch)?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            // a valid writer never emits another tag, so the bytes are damaged
            return Err(Error::ChecksumMismatch);
        }
        let flags = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let shape = Shape::new(dims).map_err(|_| Error::ChecksumMismatch)?;
        let raw = r.take(shape.numel().checked_mul(4).ok_or(Error::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(Record {
            id,
            flags,
            tensor: Tensor::from_shape(shape, data)?,
        });
    }
    if r.pos != body.len() {
        return Err(Error::ChecksumMismatch);
    }
    if Sha256::digest(body).as_slice() != &bytes[body.len()..] {
        return Err(Error::ChecksumMismatch);
    }
    Ok(records)
}

/// Every parameter and buffer of `g` in canonical order.
pub fn model_records(g: &ModelGraph) -> Vec<Record> {
    g.registry()
        .iter()
        .map(|e| Record {
            id: e.key(),
            flags: if e.trainable {
                FLAG_TRAINABLE
            } else if e.buffer {
                FLAG_BUFFER
            } else {
                0
            },
            tensor: g.tensor(e).clone(),
        })
        .collect()
}

pub fn serialize(g: &ModelGraph) -> Vec<u8> {
    encode(&model_records(g))
}

/// Overwrite the model's tensors with `records`, which must name exactly the
/// registry entries in the same order.
pub fn apply(g: &mut ModelGraph, records: Vec<Record>) -> Result<()> {
    let registry = g.registry();
    let mut records = records.into_iter();
    for entry in &registry {
        let key = entry.key();
        let rec = records.next().ok_or_else(|| Error::MissingTensor(key.clone()))?;
        if rec.id != key {
            return Err(if registry.iter().any(|e| e.key() == rec.id) {
                Error::MissingTensor(key)
            } else {
                Error::UnexpectedTensor(rec.id)
            });
        }
        if rec.tensor.shape() != &entry.shape {
            return Err(Error::WeightShapeMismatch {
                id: key,
                expected: entry.shape.clone(),
                found: rec.tensor.shape().clone(),
            });
        }
        *g.tensor_mut(entry) = rec.tensor;
    }
    if let Some(extra) = records.next() {
        return Err(Error::UnexpectedTensor(extra.id));
    }
    Ok(())
}

pub fn save(g: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, serialize(g)).map_err(|e| Error::io(path, e))
}

pub fn load(g: &mut ModelGraph, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode(&bytes).map_err(|e| e.in_file(path))?;
    apply(g, records).map_err(|e| e.in_file(path))
}

/// Hex SHA-256 of the canonical weight stream of `g`.
pub fn fingerprint(g: &ModelGraph) -> String {
    let bytes = serialize(g);
    file_fingerprint(&bytes).expect("serialized stream carries a digest")
}

/// The trailing digest of a DCW1 byte stream, as hex. Not verified.
pub fn file_fingerprint(bytes: &[u8]) -> Option<String> {
    (bytes.len() >= DIGEST_LEN).then(|| hex::encode(&bytes[bytes.len() - DIGEST_LEN..]))
}

/// Predicted size of the model file of `g`, from the registry alone.
pub fn expected_file_size(g: &ModelGraph) -> usize {
    12 + g
        .registry()
        .iter()
        .map(|e| 4 + e.key().len() + 3 + 4 * e.shape.rank() + 4 * e.shape.numel())
        .sum::<usize>()
        + DIGEST_LEN
}
