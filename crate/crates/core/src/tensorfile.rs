//! Named-tensor container shared by backbone weights and checkpoints:
//! 8-byte magic, u32 LE header length, JSON header, then raw LE tensors in
//! header order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode<T: Scalar>(magic: &[u8; 8], meta: &Value, tensors: &[(String, &Matrix<T>)]) -> Vec<u8> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        meta: meta.clone(),
        tensors: tensors.iter().map(|(n, m)| TensorEntry { name: n.clone(), rows: m.rows(), cols: m.cols() }).collect(),
    };
    let hbytes = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hbytes);
    for (_, m) in tensors {
        for x in m.data() {
            x.write_le(&mut buf);
        }
    }
    buf
}

pub fn write<T: Scalar>(
    path: &Path,
    magic: &[u8; 8],
    meta: &Value,
    tensors: &[(String, &Matrix<T>)],
) -> Result<(), TensorFileError> {
    let io = |source| TensorFileError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, encode(magic, meta, tensors)).map_err(io)
}

pub fn decode<T: Scalar>(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 8],
) -> Result<(Value, Vec<(String, Matrix<T>)>), TensorFileError> {
    let bad = |reason: String| TensorFileError::Format { path: path.to_path_buf(), reason };
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(bad(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let hbytes = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| bad(e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(bad(format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
    }
    let mut off = 12 + hlen;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = e.rows * e.cols * T::BYTES;
        let chunk = bytes.get(off..off + n).ok_or_else(|| bad(format!("tensor {} truncated", e.name)))?;
        let data = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((e.name, Matrix::from_vec(e.rows, e.cols, data)));
        off += n;
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok((header.meta, out))
}

pub fn read<T: Scalar>(path: &Path, magic: &[u8; 8]) -> Result<(Value, Vec<(String, Matrix<T>)>), TensorFileError> {
    let bytes = std::fs::read(path).map_err(|source| TensorFileError::Io { path: path.to_path_buf(), source })?;
    decode(path, &bytes, magic)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let a = Matrix::from_vec(2, 2, vec![1.0f64, -2.0, 3.5, 1e-300]);
        let b = Matrix::from_vec(1, 3, vec![0.0f64, 7.0, -0.0]);
        let meta = serde_json::json!({"step": 3});
        write(&p, b"TESTTENS", &meta, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (m, ts) = read::<f64>(&p, b"TESTTENS").unwrap();
        assert_eq!(m, meta);
        assert_eq!(ts[0].1, a);
        let refs: Vec<(String, &Matrix<f64>)> = ts.iter().map(|(n, m)| (n.clone(), m)).collect();
        assert_eq!(encode(b"TESTTENS", &m, &refs), std::fs::read(&p).unwrap());
        assert!(read::<f32>(&p, b"TESTTENS").is_err());
        assert!(read::<f64>(&p, b"OTHERMAG").is_err());
    }
}
