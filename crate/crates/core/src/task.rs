//! Task catalog: task definitions, loading from a directory of JSON
//! documents, and conformance validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Task category. The reference set has 4/4/4/4/5/3 tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskCategory {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 6] = [
        TaskCategory::T1,
        TaskCategory::T2,
        TaskCategory::T3,
        TaskCategory::T4,
        TaskCategory::T5,
        TaskCategory::T6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::T1 => "T1",
            TaskCategory::T2 => "T2",
            TaskCategory::T3 => "T3",
            TaskCategory::T4 => "T4",
            TaskCategory::T5 => "T5",
            TaskCategory::T6 => "T6",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskCategory::T1 => "Struct. Knowledge",
            TaskCategory::T2 => "Search-and-Ground",
            TaskCategory::T3 => "Comparison",
            TaskCategory::T4 => "Workflow Completion",
            TaskCategory::T5 => "Constraint-Sensitive",
            TaskCategory::T6 => "Web Search",
        }
    }

    /// Expected task count in the 24-task reference set.
    pub fn reference_count(self) -> usize {
        match self {
            TaskCategory::T5 => 5,
            TaskCategory::T6 => 3,
            _ => 4,
        }
    }

    /// Category encoded in a task id prefix, e.g. `"T5-04"` → `T5`.
    pub fn from_task_id(id: &str) -> Option<TaskCategory> {
        let (prefix, _) = id.split_once('-')?;
        prefix.parse().ok()
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task category `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    #[default]
    Hard,
    /// Guides scoring only; never changes a verdict.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsonRoot {
    Object,
    Array,
}

/// Structural JSON requirement. For `array` roots, `required_keys` applies
/// to every element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonShape {
    pub root: JsonRoot,
    #[serde(default)]
    pub required_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Maximum number of Unicode scalar values after trimming.
    CharLimit {
        max: u32,
    },
    ProhibitedWords {
        words: Vec<String>,
    },
    JsonStructure {
        schema: JsonShape,
    },
    RequiredSteps {
        steps: Vec<String>,
    },
    /// Output must stay within the named source (normally `input_data`).
    Grounding {
        source: String,
    },
}

impl ConstraintKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintKind::CharLimit { .. } => "char_limit",
            ConstraintKind::ProhibitedWords { .. } => "prohibited_words",
            ConstraintKind::JsonStructure { .. } => "json_structure",
            ConstraintKind::RequiredSteps { .. } => "required_steps",
            ConstraintKind::Grounding { .. } => "grounding",
        }
    }

    /// Plain-language restatement used inside prompts. Numeric limits are
    /// written as decimal literals.
    pub fn describe(&self) -> String {
        match self {
            ConstraintKind::CharLimit { max } => {
                format!("The output must be at most {max} characters long.")
            }
            ConstraintKind::ProhibitedWords { words } => format!(
                "The output must not contain any of these words: {}.",
                words.iter().map(|w| format!("\"{w}\"")).collect::<Vec<_>>().join(", ")
            ),
            ConstraintKind::JsonStructure { schema } => {
                let root = match schema.root {
                    JsonRoot::Object => "a JSON object",
                    JsonRoot::Array => "a JSON array of objects",
                };
                if schema.required_keys.is_empty() {
                    format!("The output must be {root}.")
                } else {
                    format!(
                        "The output must be {root} with the keys: {}.",
                        schema.required_keys.join(", ")
                    )
                }
            }
            ConstraintKind::RequiredSteps { steps } => {
                format!("The output must cover these steps in order: {}.", steps.join(" -> "))
            }
            ConstraintKind::Grounding { source } => {
                format!("Use only information from the provided {source}.")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    #[serde(flatten)]
    pub kind: ConstraintKind,
    #[serde(default)]
    pub severity: Severity,
}

impl Constraint {
    pub fn hard(kind: ConstraintKind) -> Self {
        Constraint {
            kind,
            severity: Severity::Hard,
        }
    }

    pub fn soft(kind: ConstraintKind) -> Self {
        Constraint {
            kind,
            severity: Severity::Soft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub category: TaskCategory,
    pub instruction: String,
    #[serde(default)]
    pub input_data: String,
    pub expected_format: String,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    pub requires_tool: bool,
}

impl TaskSpec {
    /// Per-task invariant violations; empty when the task is well formed.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match parse_task_id(&self.id) {
            None => out.push(format!("{}: id must have the form T<cat>-<nn>", self.id)),
            Some((cat, _)) if cat != self.category => out.push(format!(
                "{}: id prefix {cat} does not match category {}",
                self.id, self.category
            )),
            Some(_) => {}
        }
        let is_web = self.category == TaskCategory::T6;
        if self.requires_tool != is_web {
            out.push(format!(
                "{}: requires_tool={} but category is {}",
                self.id, self.requires_tool, self.category
            ));
        }
        for c in &self.constraints {
            match &c.kind {
                ConstraintKind::CharLimit { max: 0 } => out.push(format!("{}: char_limit max must be > 0", self.id)),
                ConstraintKind::ProhibitedWords { words }
                    if words.is_empty() || words.iter().any(|w| w.trim().is_empty()) =>
                {
                    out.push(format!(
                        "{}: prohibited_words must be a non-empty list of non-empty words",
                        self.id
                    ))
                }
                ConstraintKind::RequiredSteps { steps } if steps.is_empty() => {
                    out.push(format!("{}: required_steps must not be empty", self.id))
                }
                _ => {}
            }
        }
        out
    }

    pub fn char_limit(&self) -> Option<u32> {
        self.constraints.iter().find_map(|c| match c.kind {
            ConstraintKind::CharLimit { max } => Some(max),
            _ => None,
        })
    }

    pub fn expects_json(&self) -> bool {
        self.constraints
            .iter()
            .any(|c| matches!(c.kind, ConstraintKind::JsonStructure { .. }))
    }
}

fn parse_task_id(id: &str) -> Option<(TaskCategory, u32)> {
    let (prefix, num) = id.split_once('-')?;
    if num.len() != 2 || !num.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let cat = prefix.parse().ok()?;
    Some((cat, num.parse().ok()?))
}

/// Validated set of tasks, sorted by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
}

impl TaskSet {
    /// Builds a set from in-memory tasks. Only id uniqueness is enforced
    /// here; use [`validate_task_set`] for the remaining invariants.
    pub fn new(mut tasks: Vec<TaskSpec>) -> Result<Self, TaskError> {
        tasks.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = tasks.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(TaskError::DuplicateId(w[0].id.clone()));
        }
        Ok(TaskSet { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks
            .binary_search_by(|t| t.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.tasks[i])
    }

    pub fn category_counts(&self) -> BTreeMap<TaskCategory, usize> {
        let mut counts: BTreeMap<_, _> = TaskCategory::ALL.iter().map(|&c| (c, 0)).collect();
        for t in &self.tasks {
            *counts.entry(t.category).or_default() += 1;
        }
        counts
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TaskSpec> {
        self.tasks.iter()
    }
}

impl<'a> IntoIterator for &'a TaskSet {
    type Item = &'a TaskSpec;
    type IntoIter = std::slice::Iter<'a, TaskSpec>;

    fn into_iter(self) -> Self::IntoIter {
        self.tasks.iter()
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed task document {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("duplicate task id {0}")]
    DuplicateId(String),
    #[error("invalid task in {path}: {}", violations.join("; "))]
    Invalid { path: PathBuf, violations: Vec<String> },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TaskDocument {
    One(TaskSpec),
    Many(Vec<TaskSpec>),
}

/// Loads every `*.json` file in `dir`. A file holds one task object or an
/// array of them.
pub fn load_task_set(dir: &Path) -> Result<TaskSet, TaskError> {
    let io_err = |source| TaskError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();

    let mut tasks = Vec::new();
    let mut seen = BTreeSet::new();
    for path in files {
        let text = fs::read_to_string(&path).map_err(|source| TaskError::Io {
            path: path.clone(),
            source,
        })?;
        let doc = parse_document(&text).map_err(|message| TaskError::Parse {
            path: path.clone(),
            message,
        })?;
        let batch = match doc {
            TaskDocument::One(t) => vec![t],
            TaskDocument::Many(ts) => ts,
        };
        for task in batch {
            let violations = task.invariant_violations();
            if !violations.is_empty() {
                return Err(TaskError::Invalid { path, violations });
            }
            if !seen.insert(task.id.clone()) {
                return Err(TaskError::DuplicateId(task.id));
            }
            tasks.push(task);
        }
    }
    TaskSet::new(tasks)
}

fn parse_document(text: &str) -> Result<TaskDocument, String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    // Deserialize through the concrete shapes so that field errors keep
    // their names instead of the generic untagged-enum message.
    if value.is_array() {
        serde_json::from_value(value)
            .map(TaskDocument::Many)
            .map_err(|e| e.to_string())
    } else {
        serde_json::from_value(value)
            .map(TaskDocument::One)
            .map_err(|e| e.to_string())
    }
}

/// Serialized form of one task file.
pub fn task_to_json(task: &TaskSpec) -> String {
    let mut s = serde_json::to_string_pretty(task).expect("task serializes");
    s.push('\n');
    s
}

/// Writes one `<id>.json` per task.
pub fn save_task_set(tasks: &TaskSet, dir: &Path) -> Result<(), TaskError> {
    fs::create_dir_all(dir).map_err(|source| TaskError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for task in tasks {
        let path = dir.join(format!("{}.json", task.id));
        fs::write(&path, task_to_json(task)).map_err(|source| TaskError::Io { path, source })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConformanceProfile {
    /// Per-task invariants plus the exact 4/4/4/4/5/3 category counts.
    #[default]
    Paper24,
    /// Per-task invariants only.
    Open,
}

impl FromStr for ConformanceProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper-24" | "paper24" => Ok(ConformanceProfile::Paper24),
            "open" => Ok(ConformanceProfile::Open),
            other => Err(format!("unknown profile `{other}` (expected paper-24 or open)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub deviations: Vec<String>,
}

impl ValidationReport {
    pub fn is_conformant(&self) -> bool {
        self.deviations.is_empty()
    }
}

pub fn validate_task_set(tasks: &TaskSet, profile: ConformanceProfile) -> ValidationReport {
    let mut deviations: Vec<String> = tasks.iter().flat_map(TaskSpec::invariant_violations).collect();
    if profile == ConformanceProfile::Paper24 {
        if tasks.is_empty() {
            deviations.push("task set is empty".to_string());
        }
        for (cat, n) in tasks.category_counts() {
            let want = cat.reference_count();
            if n != want {
                deviations.push(format!("{cat} count {n} ≠ {want}"));
            }
        }
    }
    ValidationReport { deviations }
}
