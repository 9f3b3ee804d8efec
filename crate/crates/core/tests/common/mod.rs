//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use std::path::PathBuf;
use std::str::FromStr;

use chrono::{DateTime, TimeZone, Utc};
use serde::Deserialize;
use slm_harness::backend::GenerationOutcome;
use slm_harness::engine::make_run_id;
use slm_harness::scoring::{join, ScoreEntry, ScoreSheet, ScoredTask};
use slm_harness::{HarnessCondition, RunRecord, ScoreValue, StageKind, StageRecord};

pub const GEMMA: &str = "gemma4:e2b";
pub const QWEN: &str = "qwen3.5:2b";
pub const LLAMA: &str = "llama3.2:latest";

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn tasks_dir() -> PathBuf {
    fixtures_dir().join("tasks")
}

/// Task ids in matrix order.
pub fn task_ids() -> Vec<String> {
    let counts = [4, 4, 4, 4, 5, 3];
    counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| (1..=n).map(move |i| format!("T{}-{i:02}", c + 1)))
        .collect()
}

#[derive(Debug, Deserialize)]
struct Matrix {
    rows: Vec<MatrixRow>,
}

#[derive(Debug, Deserialize)]
pub struct MatrixRow {
    pub model: String,
    pub condition: HarnessCondition,
    pub scores: String,
    pub retries: String,
}

fn cells(s: &str) -> Vec<char> {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

pub fn matrix_rows() -> Vec<MatrixRow> {
    let text = std::fs::read_to_string(fixtures_dir().join("reference/score_matrix.json")).unwrap();
    let m: Matrix = serde_json::from_str(&text).unwrap();
    for r in &m.rows {
        assert_eq!(cells(&r.scores).len(), 24, "{} {}", r.model, r.condition);
        assert_eq!(cells(&r.retries).len(), 24, "{} {}", r.model, r.condition);
    }
    m.rows
}

pub fn fixed_time(offset_s: i64) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 3, 1, 9, 0, 0).unwrap() + chrono::Duration::seconds(offset_s)
}

/// Minimal run record with one execute stage per attempt.
pub fn synthetic_run(
    model: &str,
    condition: HarnessCondition,
    task_id: &str,
    retries: u8,
    t: DateTime<Utc>,
) -> RunRecord {
    let trace = (0..=retries)
        .map(|attempt| StageRecord {
            stage: StageKind::Execute,
            attempt,
            prompt: Some(format!("prompt {task_id} {attempt}")),
            outcome: Some(GenerationOutcome::Completed {
                text: format!("output {attempt}"),
                elapsed_s: 2.5,
            }),
            verdict: None,
            tool_call: None,
            elapsed_s: 2.5,
        })
        .collect::<Vec<_>>();
    RunRecord {
        run_id: make_run_id(model, condition, task_id, t),
        model_name: model.to_string(),
        condition,
        task_id: task_id.to_string(),
        timestamp: t,
        total_elapsed_s: 2.5 * trace.len() as f64,
        retry_count: retries,
        final_output: format!("output {retries}"),
        final_verdict: None,
        trace,
    }
}

/// Runs and score sheet for the whole reference matrix.
pub fn matrix_fixture() -> (Vec<RunRecord>, ScoreSheet) {
    let ids = task_ids();
    let mut runs = Vec::new();
    let mut entries = Vec::new();
    for (row_no, row) in matrix_rows().iter().enumerate() {
        let scores = cells(&row.scores);
        let retries = cells(&row.retries);
        for (i, id) in ids.iter().enumerate() {
            let t = fixed_time((row_no * 100 + i) as i64);
            let retry = retries[i].to_digit(10).unwrap() as u8;
            runs.push(synthetic_run(&row.model, row.condition, id, retry, t));
            let score = match scores[i] {
                '-' => ScoreValue::Unscored,
                c => ScoreValue::from_points(c.to_digit(10).unwrap() as u8).unwrap(),
            };
            entries.push(ScoreEntry {
                model: row.model.clone(),
                condition: row.condition,
                task_id: id.clone(),
                score,
                note: None,
            });
        }
    }
    (runs, ScoreSheet::from_entries(entries, "reference matrix").unwrap())
}

pub fn matrix_scores() -> Vec<ScoredTask> {
    let (runs, sheet) = matrix_fixture();
    join(&sheet, &runs)
}

pub fn only(scores: &[ScoredTask], model: &str, condition: &str) -> Vec<ScoredTask> {
    let c = HarnessCondition::from_str(condition).unwrap();
    scores
        .iter()
        .filter(|s| s.model == model && s.condition == c)
        .cloned()
        .collect()
}
