//! Binary feature cache.
//!
//! Layout (all integers little-endian): magic "MFC1", u32 version = 1,
//! u32 clip count, then per clip: u32 id length, UTF-8 id bytes, u32 T,
//! u32 D, and T*D f32 values row-major. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::MfccMatrix;

const MAGIC: &[u8; 4] = b"MFC1";
const VERSION: u32 = 1;

pub fn write_cache(path: impl AsRef<Path>, matrices: &[MfccMatrix]) -> Result<()> {
    if matrices.is_empty() {
        return Err(Error::Cache("refusing to write an empty cache".into()));
    }
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(matrices.len() as u32).to_le_bytes())?;
    for m in matrices {
        let id = m.clip_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(m.rows as u32).to_le_bytes())?;
        w.write_all(&(m.cols as u32).to_le_bytes())?;
        for v in &m.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads a feature cache; when `expected_dim` is given, every matrix must
/// have that many columns or the read fails with a cache error.
pub fn read_cache(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Vec<MfccMatrix>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Cache(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Cache(format!(
            "{}: unsupported cache version {version}",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut matrices = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let clip_id = String::from_utf8(id)
            .map_err(|e| Error::Cache(format!("{}: invalid clip id: {e}", path.display())))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if let Some(d) = expected_dim {
            if cols != d {
                return Err(Error::Cache(format!(
                    "{}: clip '{clip_id}' has dimension {cols}, config expects {d}",
                    path.display()
                )));
            }
        }
        let mut data = vec![0f32; rows * cols];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        matrices.push(MfccMatrix::new(clip_id, rows, cols, data)?);
    }
    Ok(matrices)
}
