//! Binary container for named f64 tensors with a JSON header.
//!
//! Layout: 8 magic bytes, `u32` format version, `u64` header length, the
//! UTF-8 JSON header, then every tensor's data as little-endian `f64` in
//! header order. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"AMORGPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn write_container(mut w: impl Write, meta: &serde_json::Value, tensors: &[(&str, &Matrix)]) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(n, m)| TensorInfo { name: n.to_string(), rows: m.rows(), cols: m.cols() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, m) in tensors {
        buf.clear();
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(mut r: impl Read) -> Result<(serde_json::Value, Vec<(String, Matrix)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a tensor container (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let mut bytes = vec![0u8; t.rows * t.cols * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated data for tensor {}: {e}", t.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((t.name, Matrix::from_vec(t.rows, t.cols, data)));
    }
    Ok((header.meta, out))
}

/// Writes to `path` through a temporary sibling file and a rename, so a
/// crash never leaves a half-written container behind.
pub fn save_container(path: impl AsRef<Path>, meta: &serde_json::Value, tensors: &[(&str, &Matrix)]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let f = std::fs::File::create(&tmp)?;
        write_container(std::io::BufWriter::new(f), meta, tensors)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<(String, Matrix)>)> {
    let f = std::fs::File::open(path)?;
    read_container(std::io::BufReader::new(f))
}
