//! Manual 0/1/2 rubric scores: score files, interactive entry, and the join
//! with persisted runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::engine::RunRecord;
use crate::harness::HarnessCondition;
use crate::task::{TaskCategory, TaskSet};

/// Rubric score. Unscored entries are left out of every metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScoreValue {
    Zero,
    One,
    Two,
    Unscored,
}

impl ScoreValue {
    pub fn from_points(points: u8) -> Option<Self> {
        match points {
            0 => Some(ScoreValue::Zero),
            1 => Some(ScoreValue::One),
            2 => Some(ScoreValue::Two),
            _ => None,
        }
    }

    pub fn points(self) -> Option<u8> {
        match self {
            ScoreValue::Zero => Some(0),
            ScoreValue::One => Some(1),
            ScoreValue::Two => Some(2),
            ScoreValue::Unscored => None,
        }
    }

    pub fn is_scored(self) -> bool {
        self != ScoreValue::Unscored
    }
}

impl fmt::Display for ScoreValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.points() {
            Some(p) => write!(f, "{p}"),
            None => f.write_str("unscored"),
        }
    }
}

impl Serialize for ScoreValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.points().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScoreValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Option::<u8>::deserialize(d)? {
            None => Ok(ScoreValue::Unscored),
            Some(p) => ScoreValue::from_points(p)
                .ok_or_else(|| serde::de::Error::custom(format!("score {p} not in {{0, 1, 2}}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScoreKey {
    pub model: String,
    pub condition: HarnessCondition,
    pub task_id: String,
}

impl ScoreKey {
    pub fn new(model: impl Into<String>, condition: HarnessCondition, task_id: impl Into<String>) -> Self {
        ScoreKey {
            model: model.into(),
            condition,
            task_id: task_id.into(),
        }
    }

    pub fn of_run(run: &RunRecord) -> Self {
        ScoreKey::new(run.model_name.clone(), run.condition, run.task_id.clone())
    }
}

impl fmt::Display for ScoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.model, self.condition, self.task_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Score {
    pub value: ScoreValue,
    pub note: Option<String>,
}

impl Score {
    pub fn unscored() -> Self {
        Score {
            value: ScoreValue::Unscored,
            note: None,
        }
    }
}

/// One row of a score file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub model: String,
    pub condition: HarnessCondition,
    pub task_id: String,
    pub score: ScoreValue,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("cannot read score file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed score file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("task id `{0}` does not name a known category")]
    InvalidTaskId(String),
    #[error("duplicate score for {0}")]
    Duplicate(ScoreKey),
    #[error("scores reference runs that do not exist: {}", keys.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
    UnknownKeys { keys: Vec<ScoreKey> },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScoreSheet {
    pub scores: BTreeMap<ScoreKey, Score>,
    /// Source file path or interactive session id.
    pub provenance: String,
}

impl ScoreSheet {
    pub fn from_entries(entries: Vec<ScoreEntry>, provenance: impl Into<String>) -> Result<Self, ScoreError> {
        let mut scores = BTreeMap::new();
        for e in entries {
            if TaskCategory::from_task_id(&e.task_id).is_none() {
                return Err(ScoreError::InvalidTaskId(e.task_id));
            }
            let key = ScoreKey::new(e.model, e.condition, e.task_id);
            let score = Score {
                value: e.score,
                note: e.note,
            };
            if scores.insert(key.clone(), score).is_some() {
                return Err(ScoreError::Duplicate(key));
            }
        }
        Ok(ScoreSheet {
            scores,
            provenance: provenance.into(),
        })
    }

    pub fn parse(json: &str, provenance: &str) -> Result<Self, ScoreError> {
        let entries: Vec<ScoreEntry> = serde_json::from_str(json).map_err(|source| ScoreError::Parse {
            path: provenance.to_string(),
            source,
        })?;
        Self::from_entries(entries, provenance)
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| ScoreError::Io {
            path: shown.clone(),
            source,
        })?;
        Self::parse(&text, &shown)
    }

    pub fn entries(&self) -> Vec<ScoreEntry> {
        self.scores
            .iter()
            .map(|(k, s)| ScoreEntry {
                model: k.model.clone(),
                condition: k.condition,
                task_id: k.task_id.clone(),
                score: s.value,
                note: s.note.clone(),
            })
            .collect()
    }

    /// Score-file text, rows sorted by key.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries()).expect("scores serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_json())
    }

    pub fn get(&self, key: &ScoreKey) -> ScoreValue {
        self.scores.get(key).map_or(ScoreValue::Unscored, |s| s.value)
    }

    pub fn set(&mut self, key: ScoreKey, value: ScoreValue) {
        self.scores.insert(key, Score { value, note: None });
    }

    /// Rows without runs behind them; retry counts are unknown.
    pub fn scored_tasks(&self) -> Vec<ScoredTask> {
        self.scores
            .iter()
            .filter_map(|(k, s)| {
                Some(ScoredTask {
                    model: k.model.clone(),
                    condition: k.condition,
                    task_id: k.task_id.clone(),
                    category: TaskCategory::from_task_id(&k.task_id)?,
                    score: s.value,
                    retry_count: None,
                })
            })
            .collect()
    }
}

pub enum ScoreSource<'a> {
    File(&'a Path),
    /// Already-parsed sheet (e.g. from an interactive session).
    Sheet(ScoreSheet),
}

/// Checks a sheet against the runs and fills every run without a score as
/// unscored.
pub fn ingest_scores(source: ScoreSource<'_>, runs: &[RunRecord]) -> Result<ScoreSheet, ScoreError> {
    let mut sheet = match source {
        ScoreSource::File(path) => ScoreSheet::load(path)?,
        ScoreSource::Sheet(sheet) => sheet,
    };
    let known: BTreeSet<ScoreKey> = runs.iter().map(ScoreKey::of_run).collect();
    let unknown: Vec<ScoreKey> = sheet.scores.keys().filter(|k| !known.contains(k)).cloned().collect();
    if !unknown.is_empty() {
        return Err(ScoreError::UnknownKeys { keys: unknown });
    }
    for key in known {
        sheet.scores.entry(key).or_insert_with(Score::unscored);
    }
    Ok(sheet)
}

/// Prompts for a score per run on `output`, reading answers from `input`.
/// Accepts `0`, `1`, `2` or `s` (skip); anything else is asked again. End
/// of input leaves the remaining runs unscored.
pub fn ingest_interactive<R: BufRead, W: Write>(
    runs: &[RunRecord],
    tasks: Option<&TaskSet>,
    mut input: R,
    mut output: W,
    session: &str,
) -> io::Result<ScoreSheet> {
    let mut sheet = ScoreSheet {
        scores: BTreeMap::new(),
        provenance: session.to_string(),
    };
    let mut eof = false;
    for (i, run) in runs.iter().enumerate() {
        let key = ScoreKey::of_run(run);
        if eof {
            sheet.scores.insert(key, Score::unscored());
            continue;
        }
        writeln!(
            output,
            "\n[{}/{}] {key}  (retry_count={})",
            i + 1,
            runs.len(),
            run.retry_count
        )?;
        if let Some(task) = tasks.and_then(|t| t.get(&run.task_id)) {
            writeln!(output, "instruction: {}", task.instruction)?;
            for c in &task.constraints {
                writeln!(output, "constraint: {}", c.kind.describe())?;
            }
        }
        if let Some(v) = &run.final_verdict {
            writeln!(output, "verdict: {}", if v.passed { "pass" } else { &v.message })?;
        }
        writeln!(output, "--- output ---\n{}\n--------------", run.final_output)?;
        let value = loop {
            write!(output, "score [0/1/2/s]: ")?;
            output.flush()?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                eof = true;
                break ScoreValue::Unscored;
            }
            match line.trim() {
                "0" => break ScoreValue::Zero,
                "1" => break ScoreValue::One,
                "2" => break ScoreValue::Two,
                "s" | "S" => break ScoreValue::Unscored,
                other => writeln!(output, "invalid input `{other}`; enter 0, 1, 2 or s")?,
            }
        };
        sheet.scores.insert(key, Score { value, note: None });
    }
    Ok(sheet)
}

/// A run joined with its score; the unit the metrics work on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredTask {
    pub model: String,
    pub condition: HarnessCondition,
    pub task_id: String,
    pub category: TaskCategory,
    pub score: ScoreValue,
    pub retry_count: Option<u8>,
}

/// Total join: every run gets exactly one score, unscored when absent.
/// Runs whose task id has no category are skipped.
pub fn join(sheet: &ScoreSheet, runs: &[RunRecord]) -> Vec<ScoredTask> {
    runs.iter()
        .filter_map(|run| {
            let key = ScoreKey::of_run(run);
            Some(ScoredTask {
                category: TaskCategory::from_task_id(&run.task_id)?,
                score: sheet.get(&key),
                model: key.model,
                condition: key.condition,
                task_id: key.task_id,
                retry_count: Some(run.retry_count),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_values_serialize_as_points() {
        let e = ScoreEntry {
            model: "m".into(),
            condition: HarnessCondition::Pipeline,
            task_id: "T1-01".into(),
            score: ScoreValue::Two,
            note: None,
        };
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"model":"m","condition":"pipeline","task_id":"T1-01","score":2,"note":null}"#
        );
        let back: ScoreEntry =
            serde_json::from_str(r#"{"model":"m","condition":"pipeline","task_id":"T1-01","score":null}"#).unwrap();
        assert_eq!(back.score, ScoreValue::Unscored);
        assert!(serde_json::from_str::<ScoreEntry>(
            r#"{"model":"m","condition":"pipeline","task_id":"T1-01","score":3}"#
        )
        .is_err());
    }

    #[test]
    fn unknown_category_rejected() {
        let err = ScoreSheet::parse(
            r#"[{"model":"m","condition":"pipeline","task_id":"T9-01","score":2}]"#,
            "inline",
        )
        .unwrap_err();
        assert!(matches!(err, ScoreError::InvalidTaskId(id) if id == "T9-01"));
    }

    #[test]
    fn duplicate_rows_rejected() {
        let row = r#"{"model":"m","condition":"pipeline","task_id":"T1-01","score":2}"#;
        let err = ScoreSheet::parse(&format!("[{row},{row}]"), "inline").unwrap_err();
        assert!(matches!(err, ScoreError::Duplicate(_)));
    }
}
