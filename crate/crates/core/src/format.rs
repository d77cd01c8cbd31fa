//! Binary weight files.
//!
//! ```text
//! "MCNW" | version u16 | count u32 | entries | crc32 u32
//! entry := name_len u16 | name | ndim u8 | dims u32 * ndim | f32 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian and the CRC covers every byte
//! before it. A checkpoint may append an optimizer section with the same
//! entry encoding:
//!
//! ```text
//! "MCNO" | version u16 | step u64 | count u32 | m entries | count u32 | v entries | crc32 u32
//! ```
//!
//! where this CRC covers the section only.

use std::fs;
use std::path::Path;

use thiserror::Error as ThisError;

use crate::tensor::Tensor;
use crate::train::AdamState;
use crate::weights::WeightStore;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCNW";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"MCNO";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, ThisError)]
pub enum FormatError {
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("malformed entry `{name}`: {reason}")]
    Malformed { name: String, reason: String },
    #[error("duplicate entry `{0}`")]
    Duplicate(String),
    #[error("unknown entry `{0}` for this model")]
    UnknownName(String),
    #[error("shape mismatch for `{name}`: model expects {expected:?}, file has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error("weight file lacks entry `{0}`")]
    Missing(String),
}

impl FormatError {
    /// True for errors that mean the bytes are damaged or foreign, as opposed
    /// to a well-formed file for a different model.
    pub fn is_corruption(&self) -> bool {
        !matches!(
            self,
            FormatError::UnknownName(_) | FormatError::ShapeMismatch { .. } | FormatError::Missing(_)
        )
    }
}

/// Decoded contents of a weight file, entries in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub entries: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

fn put_entries(out: &mut Vec<u8>, store: &WeightStore) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn put_crc(out: &mut Vec<u8>, from: usize) {
    let crc = crc32fast::hash(&out[from..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

pub fn encode(weights: &WeightStore, optimizer: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + weights.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_entries(&mut out, weights);
    put_crc(&mut out, 0);
    if let Some(opt) = optimizer {
        let start = out.len();
        out.extend_from_slice(OPTIMIZER_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&opt.step.to_le_bytes());
        put_entries(&mut out, &opt.m);
        put_entries(&mut out, &opt.v);
        put_crc(&mut out, start);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Checksum(format!(
                "file truncated at byte {}",
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn check_crc(&mut self, from: usize) -> std::result::Result<(), FormatError> {
        let computed = crc32fast::hash(&self.buf[from..self.pos]);
        let stored = self.u32()?;
        if stored != computed {
            return Err(FormatError::Checksum(format!(
                "stored {stored:08x}, computed {computed:08x}"
            )));
        }
        Ok(())
    }
}

/// An entry located but not yet validated.
struct RawEntry<'a> {
    name: &'a [u8],
    dims: Vec<u32>,
    payload: &'a [u8],
}

/// Walks the entry structure without interpreting it, so damaged length
/// fields surface as checksum failures rather than odd diagnostics.
fn scan_entries<'a>(c: &mut Cursor<'a>) -> std::result::Result<Vec<RawEntry<'a>>, FormatError> {
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = c.take(len)?;
        let ndim = c.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()?);
        }
        let elems = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .and_then(|e| e.checked_mul(4))
            .ok_or_else(|| FormatError::Checksum("entry size overflows".into()))?;
        let payload = c.take(elems)?;
        out.push(RawEntry {
            name,
            dims,
            payload,
        });
    }
    Ok(out)
}

fn materialize(raw: Vec<RawEntry<'_>>) -> std::result::Result<Vec<(String, Tensor)>, FormatError> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(raw.len());
    for e in raw {
        let name = String::from_utf8(e.name.to_vec()).map_err(|_| FormatError::Malformed {
            name: String::from_utf8_lossy(e.name).into_owned(),
            reason: "name is not UTF-8".into(),
        })?;
        if e.dims.len() != 4 {
            return Err(FormatError::Malformed {
                name,
                reason: format!("expected 4 dimensions, found {}", e.dims.len()),
            });
        }
        if !seen.insert(name.clone()) {
            return Err(FormatError::Duplicate(name));
        }
        let shape = [
            e.dims[0] as usize,
            e.dims[1] as usize,
            e.dims[2] as usize,
            e.dims[3] as usize,
        ];
        let data = e
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).expect("payload sized from dims");
        out.push((name, t));
    }
    Ok(out)
}

fn into_store(entries: Vec<(String, Tensor)>) -> WeightStore {
    let mut s = WeightStore::new();
    for (k, v) in entries {
        s.insert(k, v);
    }
    s
}

pub fn decode(bytes: &[u8]) -> std::result::Result<WeightFile, FormatError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if bytes.len() < 4 && MAGIC.starts_with(bytes) {
        return Err(FormatError::Checksum(format!("file truncated to {} bytes", bytes.len())));
    }
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    c.take(4)?;
    let version = c.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let raw = scan_entries(&mut c)?;
    c.check_crc(0)?;
    let entries = materialize(raw)?;

    let optimizer = if c.pos == bytes.len() {
        None
    } else {
        let start = c.pos;
        if c.take(4)? != OPTIMIZER_MAGIC {
            return Err(FormatError::Checksum(format!(
                "{} unexpected trailing bytes",
                bytes.len() - start
            )));
        }
        let version = c.u16()?;
        let step = c.u64()?;
        let m = scan_entries(&mut c)?;
        let v = scan_entries(&mut c)?;
        c.check_crc(start)?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        if c.pos != bytes.len() {
            return Err(FormatError::Checksum(format!(
                "{} unexpected trailing bytes",
                bytes.len() - c.pos
            )));
        }
        Some(AdamState {
            step,
            m: into_store(materialize(m)?),
            v: into_store(materialize(v)?),
        })
    };
    Ok(WeightFile { entries, optimizer })
}

/// Replaces every tensor in `target` with the file's, or changes nothing.
///
/// Entries are checked in file order, so the first offending entry is the
/// one reported.
pub fn apply_entries(
    target: &mut WeightStore,
    entries: Vec<(String, Tensor)>,
) -> std::result::Result<(), FormatError> {
    let mut next = WeightStore::new();
    for (name, t) in entries {
        let Some(cur) = target.get(&name) else {
            return Err(FormatError::UnknownName(name));
        };
        if cur.shape() != t.shape() {
            return Err(FormatError::ShapeMismatch {
                name,
                expected: cur.shape(),
                found: t.shape(),
            });
        }
        if !next.insert(name.clone(), t) {
            return Err(FormatError::Duplicate(name));
        }
    }
    if let Some(missing) = target.names().find(|n| !next.contains(n)) {
        return Err(FormatError::Missing(missing.to_string()));
    }
    *target = next;
    Ok(())
}

fn io(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

pub fn save_weights(path: &Path, weights: &WeightStore, optimizer: Option<&AdamState>) -> Result<()> {
    fs::write(path, encode(weights, optimizer)).map_err(io(format!("writing {}", path.display())))
}

pub fn read_weight_file(path: &Path) -> Result<WeightFile> {
    let bytes = fs::read(path).map_err(io(format!("reading {}", path.display())))?;
    Ok(decode(&bytes)?)
}

/// Loads a weight file into `target`, validating names and shapes. Returns
/// the optimizer section when one is present.
pub fn load_weights(path: &Path, target: &mut WeightStore) -> Result<Option<AdamState>> {
    let file = read_weight_file(path)?;
    apply_entries(target, file.entries)?;
    Ok(file.optimizer)
}
