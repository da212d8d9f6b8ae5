//! Binary file formats.
//!
//! Corpus files (`DGC1`): magic, little-endian `u32` count, dim_a, dim_v,
//! then `count·dim_a` little-endian `f32` values for modality A followed by
//! `count·dim_v` values for modality V, both row-major.
//!
//! Checkpoint files (`DGCK`) are assembled in [`crate::trainer`] from the
//! record helpers here: magic, `u32` version, `u32` header length, a UTF-8
//! JSON header, then tensor records (`u32` name length, name bytes, `u32`
//! rank, `u32` dims, little-endian `f64` data).

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{Modality, PairedCorpus};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 4] = b"DGC1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("file truncated in {section}")]
    Truncated { section: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

impl FormatError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Little-endian reader that names the section being read when data runs
/// out.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                section: section.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, section: &str) -> Result<u32, FormatError> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize, section: &str) -> Result<Vec<f64>, FormatError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Invalid(format!("{section}: size overflow")))?;
        let b = self.take(bytes, section)?;
        Ok(b.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    pub fn f64s(&mut self, n: usize, section: &str) -> Result<Vec<f64>, FormatError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| FormatError::Invalid(format!("{section}: size overflow")))?;
        let b = self.take(bytes, section)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

pub fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), FormatError> {
    let v = u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Appends one named tensor record.
pub fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<(), FormatError> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Reads one named tensor record. `label` identifies the record in
/// truncation errors.
pub fn read_tensor(r: &mut Reader<'_>, label: &str) -> Result<(String, Tensor), FormatError> {
    let name_len = r.u32(&format!("{label} name length"))? as usize;
    let name = r.take(name_len, &format!("{label} name"))?;
    let name = std::str::from_utf8(name)
        .map_err(|_| FormatError::Invalid(format!("{label}: tensor name is not UTF-8")))?
        .to_string();
    let rank = r.u32(&format!("tensor {name} rank"))? as usize;
    let mut shape = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        shape.push(r.u32(&format!("tensor {name} shape"))? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Invalid(format!("tensor {name}: shape overflow")))?;
    let data = r.f64s(numel, &format!("tensor {name} data"))?;
    let t = Tensor::new(shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok((name, t))
}

pub fn encode_corpus(c: &PairedCorpus) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(16 + 4 * (c.data(Modality::A).len() + c.data(Modality::V).len()));
    out.extend_from_slice(CORPUS_MAGIC);
    put_u32(&mut out, c.count())?;
    put_u32(&mut out, c.dim_a())?;
    put_u32(&mut out, c.dim_v())?;
    for m in [Modality::A, Modality::V] {
        for &v in c.data(m) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<PairedCorpus, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CORPUS_MAGIC)?;
    let count = r.u32("corpus header (count)")? as usize;
    let dim_a = r.u32("corpus header (dim_a)")? as usize;
    let dim_v = r.u32("corpus header (dim_v)")? as usize;
    let a = r.f32s(count * dim_a, "modality A data")?;
    let v = r.f32s(count * dim_v, "modality V data")?;
    r.finish()?;
    PairedCorpus::new(count, dim_a, dim_v, a, v).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn save_corpus(c: &PairedCorpus, path: &Path) -> Result<(), FormatError> {
    let bytes = encode_corpus(c)?;
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<PairedCorpus, FormatError> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_corpus(&bytes)
}
