use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::{validate_annotation, validate_tideo, SchemaError, Tideo, TideoAnnotation};

pub const TIDEOS_FILE: &str = "tideos.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: invalid JSON: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}:{line}: {source}")]
    Schema { path: PathBuf, line: usize, source: SchemaError },
    #[error("{path}:{line}: annotation for unknown tideo `{id}`")]
    UnknownTideo { path: PathBuf, line: usize, id: String },
    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId { path: PathBuf, line: usize, id: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// Reads a JSON Lines file, skipping blank lines. Returns `(line_number, value)` pairs.
pub fn read_jsonl_values(path: &Path) -> Result<Vec<(usize, Value)>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Json { path: path.to_path_buf(), line: i + 1, source })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

/// A validated corpus shard held in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusShard {
    pub tideos: Vec<Tideo>,
    pub annotations: Vec<TideoAnnotation>,
}

impl CorpusShard {
    /// Loads and validates both files of a shard directory. A missing
    /// annotations file is treated as an unannotated shard.
    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let tpath = dir.join(TIDEOS_FILE);
        let mut tideos = Vec::new();
        let mut by_id: HashMap<String, usize> = HashMap::new();
        for (line, v) in read_jsonl_values(&tpath)? {
            let t = validate_tideo(&v).map_err(|source| CorpusError::Schema { path: tpath.clone(), line, source })?;
            if by_id.insert(t.id.clone(), tideos.len()).is_some() {
                return Err(CorpusError::DuplicateId { path: tpath, line, id: t.id });
            }
            tideos.push(t);
        }
        let apath = dir.join(ANNOTATIONS_FILE);
        let mut annotations = Vec::new();
        if apath.exists() {
            for (line, v) in read_jsonl_values(&apath)? {
                let id = v.get("tideo_id").and_then(Value::as_str).unwrap_or_default().to_string();
                let Some(&idx) = by_id.get(&id) else {
                    return Err(CorpusError::UnknownTideo { path: apath, line, id });
                };
                let a = validate_annotation(&v, &tideos[idx])
                    .map_err(|source| CorpusError::Schema { path: apath.clone(), line, source })?;
                annotations.push(a);
            }
        }
        Ok(Self { tideos, annotations })
    }

    /// Writes both files, replacing any existing shard in `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tpath = dir.join(TIDEOS_FILE);
        let apath = dir.join(ANNOTATIONS_FILE);
        let _ = std::fs::remove_file(&tpath);
        let _ = std::fs::remove_file(&apath);
        let mut tw = JsonlAppender::open(&tpath)?;
        for t in &self.tideos {
            tw.append(t)?;
        }
        let mut aw = JsonlAppender::open(&apath)?;
        for a in &self.annotations {
            aw.append(a)?;
        }
        Ok(())
    }

    pub fn annotation_for(&self, tideo_id: &str) -> Option<&TideoAnnotation> {
        self.annotations.iter().find(|a| a.tideo_id == tideo_id)
    }

    /// Tideos joined with their annotation, in tideo order.
    pub fn pairs(&self) -> Vec<(&Tideo, Option<&TideoAnnotation>)> {
        let by_id: HashMap<&str, &TideoAnnotation> =
            self.annotations.iter().map(|a| (a.tideo_id.as_str(), a)).collect();
        self.tideos.iter().map(|t| (t, by_id.get(t.id.as_str()).copied())).collect()
    }
}

/// Appends one JSON record per line. Each record is serialized in full
/// before a single write, so a failure never leaves half a line behind.
pub struct JsonlAppender {
    path: PathBuf,
    file: File,
    written: usize,
}

impl JsonlAppender {
    pub fn open(path: &Path) -> Result<Self, CorpusError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self { path: path.to_path_buf(), file, written: 0 })
    }

    pub fn append<S: Serialize>(&mut self, record: &S) -> Result<(), CorpusError> {
        let mut line = serde_json::to_vec(record)
            .map_err(|source| CorpusError::Json { path: self.path.clone(), line: self.written + 1, source })?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tideo_data::{ConditionRecord, QAItem, SourceTag, TextualFrame};

    fn sample(id: &str) -> (Tideo, TideoAnnotation) {
        let t = Tideo {
            id: id.into(),
            source_tag: SourceTag::VideoCaption,
            condition: ConditionRecord::new(SourceTag::VideoCaption, "a man slices bread"),
            frames: (0..6).map(|i| TextualFrame::new(format!("step {i}"), vec!["knife".into()])).collect(),
            extra: Default::default(),
        };
        let a = TideoAnnotation {
            tideo_id: id.into(),
            dense_description: "Bread is sliced.".into(),
            qa_items: vec![QAItem::new("What is cut?", vec!["bread".into(), "cheese".into()], 0)],
            extra: Default::default(),
        };
        (t, a)
    }

    #[test]
    fn shard_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (t1, a1) = sample("x");
        let (t2, _) = sample("y");
        let shard = CorpusShard { tideos: vec![t1, t2], annotations: vec![a1] };
        shard.write(dir.path()).unwrap();
        let back = CorpusShard::load(dir.path()).unwrap();
        assert_eq!(back, shard);
        let pairs = back.pairs();
        assert!(pairs[0].1.is_some() && pairs[1].1.is_none());
    }

    #[test]
    fn load_reports_line_of_bad_record() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = sample("x");
        let good = serde_json::to_string(&t).unwrap();
        std::fs::write(dir.path().join(TIDEOS_FILE), format!("{good}\n{{\"id\": \"z\"}}\n")).unwrap();
        match CorpusShard::load(dir.path()) {
            Err(CorpusError::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
