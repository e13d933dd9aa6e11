//! `FFS1` feature-store format.
//!
//! ```text
//! "FFS1" | version u32 | n u32 | d u32 | flags u32
//! n*d f32 (row-major)
//! [n u32 labels]     if flags & 1
//! [n u32 subgroups]  if flags & 2
//! [n u64 ids]        if flags & 4
//! ```
//!
//! All integers and floats are little-endian. The set's role is not part of
//! the file; callers supply it when reading.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{FeatureSet, SetRole};

pub const MAGIC: &[u8; 4] = b"FFS1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub const FLAG_LABELS: u32 = 1;
pub const FLAG_SUBGROUPS: u32 = 1 << 1;
pub const FLAG_IDS: u32 = 1 << 2;
const KNOWN_FLAGS: u32 = FLAG_LABELS | FLAG_SUBGROUPS | FLAG_IDS;

pub fn encode_feature_set(set: &FeatureSet) -> Vec<u8> {
    let n = set.len();
    let mut flags = FLAG_LABELS | FLAG_IDS;
    if set.subgroups().is_some() {
        flags |= FLAG_SUBGROUPS;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + n * (set.dim() * 4 + 16));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, set.dim() as u32, flags] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in set.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in set.labels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(sg) = set.subgroups() {
        for v in sg {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in set.ids() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Bounds-checked little-endian reader that reports byte offsets.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(Error::format(
                self.offset(),
                format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.remaining()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    /// Fails unless `count` items of `width` bytes fit in the remaining input.
    pub(crate) fn ensure(&self, count: u64, width: u64, what: &str) -> Result<()> {
        let need = count.checked_mul(width);
        match need {
            Some(need) if need <= self.remaining() as u64 => Ok(()),
            _ => Err(Error::format(
                self.offset(),
                format!("truncated {what}: {count} items of {width} bytes do not fit"),
            )),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_feature_set(bytes: &[u8], role: SetRole) -> Result<FeatureSet> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:?}, expected \"FFS1\""),
        ));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n = cur.u32("record count")? as usize;
    let d = cur.u32("dimension")? as usize;
    if d == 0 {
        return Err(Error::format(12, "dimension is 0"));
    }
    let flags = cur.u32("flags")?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(Error::format(16, format!("unknown flag bits {flags:#x}")));
    }

    cur.ensure(n as u64 * d as u64, 4, "vector payload")?;
    let data_offset = cur.offset();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let v = cur.f32("vector payload")?;
        if !v.is_finite() {
            return Err(Error::format(cur.offset() - 4, "non-finite component"));
        }
        data.push(v);
    }

    let read_u32s = |cur: &mut Cursor, what: &str| -> Result<Vec<u32>> {
        cur.ensure(n as u64, 4, what)?;
        (0..n).map(|_| cur.u32(what)).collect()
    };
    let labels = if flags & FLAG_LABELS != 0 {
        read_u32s(&mut cur, "labels")?
    } else {
        vec![0; n]
    };
    let subgroups = if flags & FLAG_SUBGROUPS != 0 {
        Some(read_u32s(&mut cur, "subgroups")?)
    } else {
        None
    };
    let ids_offset = cur.offset();
    let ids = if flags & FLAG_IDS != 0 {
        cur.ensure(n as u64, 8, "ids")?;
        (0..n).map(|_| cur.u64("ids")).collect::<Result<Vec<_>>>()?
    } else {
        (0..n as u64).collect()
    };
    if cur.remaining() != 0 {
        return Err(Error::format(
            cur.offset(),
            format!("{} trailing bytes", cur.remaining()),
        ));
    }

    FeatureSet::new(d, role, ids, labels, subgroups, data).map_err(|e| match e {
        Error::InvalidArgument(reason) if reason.contains("duplicate") => {
            Error::format(ids_offset, reason)
        }
        Error::InvalidArgument(reason) => Error::format(data_offset, reason),
        other => other,
    })
}

pub fn write_feature_set(set: &FeatureSet, path: &Path) -> Result<()> {
    write_atomic(path, &encode_feature_set(set))
}

pub fn read_feature_set(path: &Path, role: SetRole) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_set(&bytes, role)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
