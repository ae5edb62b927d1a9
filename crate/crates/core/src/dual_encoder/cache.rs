//! Feature cache container: magic, JSON header, dense little-endian f32 rows,
//! plus a JSON sidecar mapping content keys to row numbers.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CACHE_MAGIC: &[u8; 8] = b"TOPAFC01";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: not a feature cache file")]
    BadMagic(PathBuf),
    #[error("{path}: bad header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("row has dimension {found}, cache holds {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("row {row} out of range for {count} rows")]
    RowOutOfRange { row: usize, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub dimension: usize,
    pub descriptor: String,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

/// Content key for a piece of encoded text.
pub fn content_key(descriptor: &str, content: &str) -> String {
    let mut h = Sha256::new();
    h.update(descriptor.as_bytes());
    h.update([0u8]);
    h.update(content.as_bytes());
    hex::encode(h.finalize())
}

fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".index.json");
    PathBuf::from(p)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io { path: path.to_path_buf(), source }
}

/// In-memory, append-only cache. Rows are stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub header: CacheHeader,
    rows: Vec<f32>,
    keys: BTreeMap<String, usize>,
}

impl FeatureCache {
    pub fn new(descriptor: impl Into<String>, dimension: usize) -> Self {
        Self {
            header: CacheHeader { dimension, descriptor: descriptor.into(), count: 0, temperature: None, fingerprint: None },
            rows: Vec::new(),
            keys: BTreeMap::new(),
        }
    }

    /// Adds a row under `key`; an existing key keeps its first row.
    pub fn insert<T: Scalar>(&mut self, key: &str, row: &[T]) -> Result<usize, CacheError> {
        if row.len() != self.header.dimension {
            return Err(CacheError::DimensionMismatch { expected: self.header.dimension, found: row.len() });
        }
        if let Some(&r) = self.keys.get(key) {
            return Ok(r);
        }
        let r = self.push(row)?;
        self.keys.insert(key.to_string(), r);
        Ok(r)
    }

    /// Adds an unkeyed row (frame order matters, e.g. one video per file).
    pub fn push<T: Scalar>(&mut self, row: &[T]) -> Result<usize, CacheError> {
        if row.len() != self.header.dimension {
            return Err(CacheError::DimensionMismatch { expected: self.header.dimension, found: row.len() });
        }
        self.rows.extend(row.iter().map(|x| x.as_f64() as f32));
        self.header.count += 1;
        Ok(self.header.count - 1)
    }

    pub fn row_of(&self, key: &str) -> Option<usize> {
        self.keys.get(key).copied()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let d = self.header.dimension;
        &self.rows[r * d..(r + 1) * d]
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_vec(self.header.count, self.header.dimension, self.rows.iter().map(|&x| T::lit(x as f64)).collect())
    }

    pub fn write(&self, path: &Path) -> Result<(), CacheError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut buf = Vec::with_capacity(12 + header.len() + self.rows.len() * 4);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for x in &self.rows {
            x.write_le(&mut buf);
        }
        let mut f = File::create(path).map_err(io_err(path))?;
        f.write_all(&buf).map_err(io_err(path))?;
        let ipath = index_path(path);
        let index = serde_json::to_vec_pretty(&self.keys).expect("index serializes");
        std::fs::write(&ipath, index).map_err(io_err(&ipath))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CacheError> {
        let reader = FeatureCacheReader::open(path)?;
        let d = reader.header.dimension;
        let mut rows = Vec::with_capacity(reader.header.count * d);
        for r in 0..reader.header.count {
            rows.extend(reader.read_row(r)?);
        }
        let ipath = index_path(path);
        let keys = match std::fs::read(&ipath) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| CacheError::BadHeader { path: ipath.clone(), reason: e.to_string() })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(source) => return Err(CacheError::Io { path: ipath, source }),
        };
        Ok(Self { header: reader.header, rows, keys })
    }
}

/// Lazy reader that counts the feature bytes it pulls from disk.
#[derive(Debug)]
pub struct FeatureCacheReader {
    path: PathBuf,
    pub header: CacheHeader,
    data_offset: u64,
    bytes_read: Cell<u64>,
}

impl FeatureCacheReader {
    /// Reads only the header.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let mut f = File::open(path).map_err(io_err(path))?;
        let mut head = [0u8; 12];
        f.read_exact(&mut head).map_err(|_| CacheError::BadMagic(path.to_path_buf()))?;
        if &head[..8] != CACHE_MAGIC {
            return Err(CacheError::BadMagic(path.to_path_buf()));
        }
        let len = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
        let mut hbytes = vec![0u8; len];
        f.read_exact(&mut hbytes)
            .map_err(|e| CacheError::BadHeader { path: path.to_path_buf(), reason: e.to_string() })?;
        let header: CacheHeader = serde_json::from_slice(&hbytes)
            .map_err(|e| CacheError::BadHeader { path: path.to_path_buf(), reason: e.to_string() })?;
        let data_offset = 12 + len as u64;
        let expected = data_offset + (header.count * header.dimension * 4) as u64;
        let actual = f.metadata().map_err(io_err(path))?.len();
        if actual != expected {
            return Err(CacheError::BadHeader {
                path: path.to_path_buf(),
                reason: format!("file is {actual} bytes, header implies {expected}"),
            });
        }
        Ok(Self { path: path.to_path_buf(), header, data_offset, bytes_read: Cell::new(0) })
    }

    pub fn read_row(&self, row: usize) -> Result<Vec<f32>, CacheError> {
        if row >= self.header.count {
            return Err(CacheError::RowOutOfRange { row, count: self.header.count });
        }
        let d = self.header.dimension;
        let mut f = File::open(&self.path).map_err(io_err(&self.path))?;
        f.seek(SeekFrom::Start(self.data_offset + (row * d * 4) as u64)).map_err(io_err(&self.path))?;
        let mut bytes = vec![0u8; d * 4];
        f.read_exact(&mut bytes).map_err(io_err(&self.path))?;
        self.bytes_read.set(self.bytes_read.get() + bytes.len() as u64);
        Ok(bytes.chunks_exact(4).map(f32::read_le).collect())
    }

    /// All rows in order, as a `count x dimension` matrix.
    pub fn read_matrix<T: Scalar>(&self) -> Result<Matrix<T>, CacheError> {
        let mut data = Vec::with_capacity(self.header.count * self.header.dimension);
        for r in 0..self.header.count {
            data.extend(self.read_row(r)?.into_iter().map(|x| T::lit(x as f64)));
        }
        Ok(Matrix::from_vec(self.header.count, self.header.dimension, data))
    }

    /// Feature bytes read so far (the header is not counted).
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.get()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.bin");
        let mut c = FeatureCache::new("enc", 3);
        let k = content_key("enc", "a cup");
        assert_eq!(c.insert(&k, &[1.0f64, 2.0, 3.0]).unwrap(), 0);
        assert_eq!(c.insert(&k, &[9.0f64, 9.0, 9.0]).unwrap(), 0);
        c.push(&[0.5f32, -0.5, 0.25]).unwrap();
        c.header.temperature = Some(0.01);
        c.write(&path).unwrap();
        let back = FeatureCache::read(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.row(1), &[0.5, -0.5, 0.25]);
        assert!(matches!(c.push(&[1.0f32]), Err(CacheError::DimensionMismatch { .. })));
    }

    #[test]
    fn reader_counts_feature_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        let mut c = FeatureCache::new("enc", 4);
        for i in 0..5 {
            c.push(&[i as f32; 4]).unwrap();
        }
        c.write(&path).unwrap();
        let r = FeatureCacheReader::open(&path).unwrap();
        assert_eq!(r.bytes_read(), 0);
        assert_eq!(r.read_row(2).unwrap(), vec![2.0; 4]);
        assert_eq!(r.bytes_read(), 16);
        std::fs::write(dir.path().join("junk.bin"), b"nope").unwrap();
        assert!(matches!(FeatureCacheReader::open(&dir.path().join("junk.bin")), Err(CacheError::BadMagic(_))));
    }
}
