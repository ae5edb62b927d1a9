//! Dataset adapters that turn benchmark files into [`EvalItem`]s.

use std::cell::Cell;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalItem};
use crate::dual_encoder::{encode_video_features, FeatureCacheReader, SequenceRepresentation};
use crate::scalar::Scalar;

/// Source of evaluation items. `with_features = false` must not touch any
/// feature storage.
pub trait DatasetAdapter<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn item(&self, index: usize, with_features: bool) -> Result<EvalItem<T>, EvalError>;
}

impl<T: Scalar> DatasetAdapter<T> for [EvalItem<T>] {
    fn len(&self) -> usize {
        <[EvalItem<T>]>::len(self)
    }

    fn item(&self, index: usize, with_features: bool) -> Result<EvalItem<T>, EvalError> {
        let mut it = self[index].clone();
        if !with_features {
            it.features = None;
        }
        Ok(it)
    }
}

impl<T: Scalar> DatasetAdapter<T> for Vec<EvalItem<T>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn item(&self, index: usize, with_features: bool) -> Result<EvalItem<T>, EvalError> {
        self.as_slice().item(index, with_features)
    }
}

/// One line of a benchmark file. `feature_file` is relative to the file's
/// directory and holds one row per video frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    pub feature_file: String,
    pub question: String,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
}

/// JSON Lines benchmark with per-video feature cache files.
#[derive(Debug)]
pub struct JsonlBenchmark {
    root: PathBuf,
    records: Vec<BenchmarkRecord>,
    feature_bytes: Cell<u64>,
}

impl JsonlBenchmark {
    pub fn open(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: BenchmarkRecord = serde_json::from_str(line).map_err(|e| EvalError::BadRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records, feature_bytes: Cell::new(0) })
    }

    pub fn records(&self) -> &[BenchmarkRecord] {
        &self.records
    }

    /// Feature bytes pulled from cache files so far.
    pub fn feature_bytes_read(&self) -> u64 {
        self.feature_bytes.get()
    }
}

impl<T: Scalar> DatasetAdapter<T> for JsonlBenchmark {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn item(&self, index: usize, with_features: bool) -> Result<EvalItem<T>, EvalError> {
        let r = &self.records[index];
        let features = if with_features {
            let reader = FeatureCacheReader::open(&self.root.join(&r.feature_file))?;
            let m = reader.read_matrix::<T>()?;
            self.feature_bytes.set(self.feature_bytes.get() + reader.bytes_read());
            let rows: Vec<Vec<T>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
            let seq: SequenceRepresentation<T> = encode_video_features(&rows, m.cols(), rows.len().max(1))?;
            Some(seq)
        } else {
            None
        };
        Ok(EvalItem {
            id: r.id.clone(),
            features,
            question: r.question.clone(),
            options: r.options.clone(),
            answer_index: r.answer_index,
        })
    }
}
