//! Stage directories `<out>/<stage>-<fingerprint prefix>[-rN]` and their
//! manifests. A manifest is written last, so its presence marks a complete
//! stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use topa::fingerprint::{fingerprint, short};

use crate::error::{failed, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub fingerprint: String,
    /// Fingerprint of the whole run config that produced the stage.
    pub run_fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub config: Value,
    pub partial: bool,
}

/// Identity of one stage invocation: its own config plus upstream fingerprints.
#[derive(Debug, Clone)]
pub struct StageKey {
    pub stage: &'static str,
    pub fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub config: Value,
}

impl StageKey {
    pub fn new(stage: &'static str, config: Value, inputs: &[(&str, &str)]) -> Self {
        let inputs: BTreeMap<String, String> = inputs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let fingerprint = fingerprint(&serde_json::json!({ "stage": stage, "config": config, "inputs": inputs }));
        Self { stage, fingerprint, inputs, config }
    }

    fn base_dir(&self, out: &Path) -> PathBuf {
        out.join(format!("{}-{}", self.stage, short(&self.fingerprint)))
    }
}

pub enum Prepared {
    /// A fresh, empty directory to write into.
    Fresh(PathBuf),
    /// `--resume` found this stage already complete.
    Done(PathBuf),
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(failed)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| failed(format!("{}: {e}", path.display())))
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn manifest_of(dir: &Path) -> Option<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    p.exists().then(|| read_json(&p).ok()).flatten()
}

fn create(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| failed(format!("{}: {e}", dir.display())))
}

/// Picks the directory a stage writes to. Without `resume` an existing
/// directory is never touched; the run goes to the next `-rN` suffix.
pub fn prepare(out: &Path, key: &StageKey, resume: bool) -> Result<Prepared, CliError> {
    let base = key.base_dir(out);
    if resume {
        if let Some(m) = manifest_of(&base) {
            if m.fingerprint == key.fingerprint {
                return Ok(Prepared::Done(base));
            }
            return Err(CliError::FingerprintMismatch(format!(
                "{} holds a `{}` stage with fingerprint {}, expected {}",
                base.display(),
                m.stage,
                m.fingerprint,
                key.fingerprint
            )));
        }
        if base.exists() {
            std::fs::remove_dir_all(&base).map_err(|e| failed(format!("{}: {e}", base.display())))?;
        }
        create(&base)?;
        return Ok(Prepared::Fresh(base));
    }
    let mut dir = base.clone();
    let mut n = 2;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-r{n}", base.display()));
        n += 1;
    }
    create(&dir)?;
    Ok(Prepared::Fresh(dir))
}

pub fn finish(dir: &Path, key: &StageKey, run_fingerprint: &str, partial: bool) -> Result<(), CliError> {
    let m = Manifest {
        stage: key.stage.to_string(),
        fingerprint: key.fingerprint.clone(),
        run_fingerprint: run_fingerprint.to_string(),
        inputs: key.inputs.clone(),
        config: key.config.clone(),
        partial,
    };
    write_json(&dir.join(MANIFEST_FILE), &m)
}

/// Finds a completed stage with the exact fingerprint, preferring the
/// original directory over reruns. `producer` names the command to suggest.
pub fn locate(out: &Path, stage: &str, fp: &str, producer: &str) -> Result<(PathBuf, Manifest), CliError> {
    let prefix = format!("{stage}-{}", short(fp));
    let mut candidates: Vec<(usize, PathBuf)> = Vec::new();
    if let Ok(entries) = std::fs::read_dir(out) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            let rank = if name == prefix {
                Some(1)
            } else {
                name.strip_prefix(&format!("{prefix}-r")).and_then(|n| n.parse::<usize>().ok())
            };
            if let Some(r) = rank {
                candidates.push((r, e.path()));
            }
        }
    }
    candidates.sort();
    for (_, dir) in candidates {
        if let Some(m) = manifest_of(&dir) {
            if m.stage != stage || m.fingerprint != fp {
                return Err(CliError::FingerprintMismatch(format!(
                    "{} was produced with fingerprint {}, expected {fp}",
                    dir.display(),
                    m.fingerprint
                )));
            }
            return Ok((dir, m));
        }
    }
    Err(CliError::Usage(format!(
        "no completed `{stage}` stage with fingerprint {} under {}; run `topa {producer}` with the same config first",
        short(fp),
        out.display()
    )))
}
