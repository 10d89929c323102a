//! `EDBF` embedding files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EDBF"  u32 version  u32 D  u64 N
//! N × { u32 len, utt id UTF-8, u32 len, speaker id UTF-8, D × f64 }
//! ```
//!
//! The domain is not stored; callers say which domain a file belongs to.

use std::path::Path;

use editnet_core::{Domain, EmbeddingSet, Matrix};

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EDBF";
pub const VERSION: u32 = 1;

pub fn encode(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let d = set.dim();
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(u32::try_from(d).map_err(|_| Error::format("dimension exceeds u32", 8))?);
    w.u64(set.len() as u64);
    for r in 0..set.len() {
        w.str32(&set.utt_ids[r])?;
        w.str32(&set.speaker_ids[r])?;
        w.f64s(set.embeddings.row(r));
    }
    Ok(w.buf)
}

pub fn decode(bytes: &[u8], domain: Domain) -> Result<EmbeddingSet> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("bad magic, expected \"EDBF\"", 0));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            what: "EDBF",
            found: version,
            expected: VERSION,
        });
    }
    let d = r.u32("dimension")? as usize;
    let n = r.u64("row count")?;
    // Each row needs at least 8 + 8·D bytes, which bounds N before allocating.
    let min_row = 8 + 8 * d as u64;
    if n.saturating_mul(min_row) > r.remaining() as u64 {
        return Err(Error::format(
            format!("truncated input: {n} rows of dimension {d} cannot fit in {} bytes", r.remaining()),
            r.offset(),
        ));
    }
    let n = n as usize;
    let mut data = Vec::with_capacity(n * d);
    let mut utt_ids = Vec::with_capacity(n);
    let mut speaker_ids = Vec::with_capacity(n);
    for row in 0..n {
        utt_ids.push(r.str32(&format!("utterance id of row {row}"))?);
        speaker_ids.push(r.str32(&format!("speaker id of row {row}"))?);
        let at = r.offset();
        let values = r.f64s(d, &format!("embedding of row {row}"))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("non-finite value in row {row}"), at));
        }
        data.extend_from_slice(&values);
    }
    r.finish("the last row")?;
    let embeddings = Matrix::from_vec(n, d, data)?;
    Ok(EmbeddingSet::new(domain, embeddings, utt_ids, speaker_ids)?)
}

pub fn save(set: &EmbeddingSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(set)?).map_err(Error::io(path))
}

pub fn load(path: &Path, domain: Domain) -> Result<EmbeddingSet> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, domain)
}
