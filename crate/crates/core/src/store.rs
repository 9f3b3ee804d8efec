//! One JSON file per run under `results/{condition}/{run_id}.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RunRecord;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run file {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { path: PathBuf, found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize)]
struct RunDocumentRef<'a> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a RunRecord,
}

#[derive(Deserialize)]
struct RunDocument {
    schema_version: u32,
    #[serde(flatten)]
    record: RunRecord,
}

#[derive(Debug, Clone)]
pub struct ResultsStore {
    root: PathBuf,
}

impl ResultsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResultsStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn results_dir(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn path_for(&self, record: &RunRecord) -> PathBuf {
        self.results_dir()
            .join(record.condition.as_str())
            .join(format!("{}.json", record.run_id))
    }

    /// Writes through a temp file and a rename, so the final name never
    /// refers to a partial document.
    pub fn save_run(&self, record: &RunRecord) -> Result<PathBuf, StoreError> {
        let path = self.path_for(record);
        let dir = path.parent().expect("run path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let doc = RunDocumentRef {
            schema_version: SCHEMA_VERSION,
            record,
        };
        let mut json = serde_json::to_vec_pretty(&doc).expect("run record serializes");
        json.push(b'\n');
        let tmp = dir.join(format!(".{}.json.tmp", record.run_id));
        let write = || -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&json)?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(io_err(&tmp)(e));
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn load_run(path: &Path) -> Result<RunRecord, StoreError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let doc: RunDocument = serde_json::from_str(&text).map_err(|source| StoreError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion {
                path: path.to_path_buf(),
                found: doc.schema_version,
            });
        }
        Ok(doc.record)
    }

    /// Every run on disk, sorted by run id. A missing `results/` directory
    /// yields an empty list.
    pub fn load_all(&self) -> Result<Vec<RunRecord>, StoreError> {
        let dir = self.results_dir();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut runs = Vec::new();
        for cond in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let cond = cond.map_err(io_err(&dir))?.path();
            if !cond.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&cond).map_err(io_err(&cond))? {
                let path = entry.map_err(io_err(&cond))?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.starts_with('.') || !name.ends_with(".json") {
                    continue;
                }
                runs.push(Self::load_run(&path)?);
            }
        }
        runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(runs)
    }
}

/// Keeps the latest run per (model, condition, task): greatest timestamp,
/// ties broken by the greatest run id. Output is sorted by that key.
pub fn dedupe_latest(records: Vec<RunRecord>) -> Vec<RunRecord> {
    let mut latest: BTreeMap<(String, crate::harness::HarnessCondition, String), RunRecord> = BTreeMap::new();
    for r in records {
        let key = (r.model_name.clone(), r.condition, r.task_id.clone());
        match latest.get(&key) {
            Some(cur) if (cur.timestamp, &cur.run_id) >= (r.timestamp, &r.run_id) => {}
            _ => {
                latest.insert(key, r);
            }
        }
    }
    latest.into_values().collect()
}
