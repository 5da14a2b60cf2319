//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "DCAPSCK\0"
//! version    u32 LE
//! count      u32 LE   number of records
//! record*    name_len u32, name (UTF-8), kind u8, payload
//!              kind 0 tensor: ndim u32, dims u64 each, f32 LE values
//!              kind 1 text:   len u64, UTF-8 bytes
//!              kind 2 u64:    8 bytes LE
//! trailer    32 bytes SHA-256 of everything before it
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DCAPSCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordValue {
    Tensor(Tensor<f32>),
    Text(String),
    U64(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub value: RecordValue,
}

/// Ordered named records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordFile {
    pub records: Vec<Record>,
}

impl RecordFile {
    pub fn push(&mut self, name: impl Into<String>, value: RecordValue) {
        self.records.push(Record {
            name: name.into(),
            value,
        });
    }

    pub fn get(&self, name: &str) -> Option<&RecordValue> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.value)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            match &r.value {
                RecordValue::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                RecordValue::Text(s) => {
                    out.push(1);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                RecordValue::U64(v) => {
                    out.push(2);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |d: &str| Error::corrupt(path, d.to_string());
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch"));
        }
        let mut cur = Cursor { buf: body, pos: 12 };
        let count = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let rec = cur.record().ok_or_else(|| corrupt("truncated or malformed record"))?;
            records.push(rec);
        }
        if cur.pos != body.len() {
            return Err(corrupt("trailing bytes after records"));
        }
        Ok(RecordFile { records })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.encode()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn record(&mut self) -> Option<Record> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let kind = self.take(1)?[0];
        let value = match kind {
            0 => {
                let ndim = self.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim.min(16));
                for _ in 0..ndim {
                    shape.push(usize::try_from(self.u64()?).ok()?);
                }
                let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
                let raw = self.take(n.checked_mul(4)?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                RecordValue::Tensor(Tensor::new(&shape, data).ok()?)
            }
            1 => {
                let len = usize::try_from(self.u64()?).ok()?;
                RecordValue::Text(String::from_utf8(self.take(len)?.to_vec()).ok()?)
            }
            2 => RecordValue::U64(self.u64()?),
            _ => return None,
        };
        Some(Record { name, value })
    }
}
