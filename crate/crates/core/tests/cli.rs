mod common;

use std::io::Cursor;
use std::path::Path;

use slm_harness::cli::run_cli;
use slm_harness::ResultsStore;

struct Output {
    code: i32,
    out: String,
    err: String,
}

fn cli(args: &[&str], stdin: &str) -> Output {
    let mut input = Cursor::new(stdin.as_bytes().to_vec());
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["slm-harness"];
    argv.extend_from_slice(args);
    let code = run_cli(argv, &mut input, &mut out, &mut err);
    Output {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn demo_config() -> String {
    common::fixtures_dir()
        .join("demo/config.json")
        .to_string_lossy()
        .into_owned()
}

fn count_files(dir: &Path) -> usize {
    walk(dir).len()
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn run_writes_one_file_per_task_and_condition() {
    let dir = tempfile::tempdir().unwrap();
    let r = cli(
        &[
            "run",
            "--config",
            &demo_config(),
            "--store",
            s(dir.path()),
            "--fixed-clock",
            "2026-03-01T09:00:00Z",
        ],
        "",
    );
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.err.contains("72 runs saved"), "{}", r.err);
    assert_eq!(count_files(&dir.path().join("results")), 72);
    for c in ["model-only", "minimal-shell", "pipeline"] {
        assert_eq!(count_files(&dir.path().join("results").join(c)), 24);
    }
    // The scripted timeout on T1-03 is recovered only under the pipeline.
    assert!(
        r.out
            .lines()
            .any(|l| l.starts_with("T1-03") && l.contains("pipeline") && l.contains("retries=1")),
        "{}",
        r.out
    );
    assert!(r
        .out
        .lines()
        .any(|l| l.starts_with("T1-03") && l.contains("model-only") && l.contains("no-output")));
    // The recorded 202 for the Rust query fails that run; the others pass.
    assert!(r
        .out
        .lines()
        .any(|l| l.starts_with("T6-02") && l.contains("pipeline") && l.contains("fail(incomplete_completion)")));
    assert!(r
        .out
        .lines()
        .any(|l| l.starts_with("T6-01") && l.contains("minimal-shell") && l.contains("fail(grounding_failure)")));
}

#[test]
fn run_subset_of_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let r = cli(
        &[
            "run",
            "--config",
            &demo_config(),
            "--store",
            s(dir.path()),
            "--conditions",
            "pipeline-no-plan",
        ],
        "",
    );
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(count_files(&dir.path().join("results/pipeline-no-plan")), 24);
}

#[test]
fn run_into_unwritable_store_fails() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let r = cli(&["run", "--config", &demo_config(), "--store", s(&blocker)], "");
    assert_ne!(r.code, 0);
    assert!(r.err.starts_with("error:"), "{}", r.err);
}

#[test]
fn missing_config_fails_cleanly() {
    let r = cli(&["run", "--config", "/nonexistent/config.json"], "");
    assert_eq!(r.code, 1);
    assert!(r.err.contains("/nonexistent/config.json"));
}

/// Stores the whole reference matrix and its score file.
fn matrix_store() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::new(dir.path().join("store"));
    let (runs, sheet) = common::matrix_fixture();
    for r in &runs {
        store.save_run(r).unwrap();
    }
    let scores = dir.path().join("scores.json");
    sheet.save(&scores).unwrap();
    (dir, scores)
}

#[test]
fn report_golden_rows() {
    let (dir, scores) = matrix_store();
    let store = dir.path().join("store");
    let r = cli(&["report", "--store", s(&store), "--scores", s(&scores)], "");
    assert_eq!(r.code, 0, "{}", r.err);
    for row in [
        "Scope: T1–T5",
        "| gemma4:e2b | minimal-shell | 0.714 (15/21) / 0.810 (17/21) ✓ | — |",
        "| gemma4:e2b | model-only | 0.762 (16/21) / 0.857 (18/21) ✓ | — |",
        "| gemma4:e2b | pipeline | 0.952 (20/21) / 1.000 (21/21) ✓ | 0.000 (0/1) |",
        "| llama3.2:latest | model-only | 0.429 (9/21) / 0.952 (20/21) × | — |",
        "| llama3.2:latest | pipeline | 0.762 (16/21) / 0.857 (18/21) ✓ | 1.000 (5/5) |",
        "| qwen3.5:2b | pipeline | 0.857 (18/21) / 1.000 (21/21) ✓ | 0.000 (0/3) |",
    ] {
        assert!(r.out.lines().any(|l| l == row), "missing {row:?} in\n{}", r.out);
    }
    assert!(r.err.contains("2 unscored runs"), "{}", r.err);

    let r = cli(
        &[
            "report",
            "--store",
            s(&store),
            "--scores",
            s(&scores),
            "--scope",
            "t1-t6",
        ],
        "",
    );
    for row in [
        "| gemma4:e2b | pipeline | 0.833 (20/24) / 0.875 (21/24) ✓ | 0.750 (3/4) |",
        "| gemma4:e2b | pipeline-no-verify | 0.909 (20/22) / 1.000 (22/22) ✓ | 0.000 (0/2) |",
        "| qwen3.5:2b | pipeline | 0.792 (19/24) / 0.958 (23/24) ✓ | 0.000 (0/5) |",
    ] {
        assert!(r.out.lines().any(|l| l == row), "missing {row:?} in\n{}", r.out);
    }

    let r = cli(
        &[
            "report",
            "--store",
            s(&store),
            "--scores",
            s(&scores),
            "--format",
            "json",
        ],
        "",
    );
    let v: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 12);
}

#[test]
fn ablate_renders_contributions() {
    let (dir, scores) = matrix_store();
    let store = dir.path().join("store");
    let r = cli(
        &[
            "ablate",
            "--store",
            s(&store),
            "--scores",
            s(&scores),
            "--model",
            "gemma4:e2b",
        ],
        "",
    );
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(
        r.out.contains("| pipeline-no-plan | 0.792 | −0.041 | 24.7% |"),
        "{}",
        r.out
    );
    assert!(
        r.out
            .contains("| pipeline-no-verify | 0.909 | +0.076 (reversed) | n/a |"),
        "{}",
        r.out
    );
    assert!(r.out.contains("total gain +0.166"), "{}", r.out);

    let r = cli(
        &[
            "ablate",
            "--store",
            s(&store),
            "--scores",
            s(&scores),
            "--model",
            "qwen3.5:2b",
        ],
        "",
    );
    assert_eq!(r.code, 1);
    assert!(r.err.contains("pipeline-no-plan"), "{}", r.err);
}

#[test]
fn report_on_empty_store_fails() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.json");
    std::fs::write(&scores, "[]").unwrap();
    let r = cli(&["report", "--store", s(dir.path()), "--scores", s(&scores)], "");
    assert_eq!(r.code, 1);
    assert!(r.err.contains("no runs"), "{}", r.err);
}

#[test]
fn score_interactively_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let run = cli(
        &[
            "run",
            "--config",
            &demo_config(),
            "--store",
            s(&store),
            "--conditions",
            "model-only",
            "--fixed-clock",
            "2026-03-01T09:00:00Z",
        ],
        "",
    );
    assert_eq!(run.code, 0);
    let answers = "2\n".repeat(23) + "7\n0\n";
    let scores = dir.path().join("scores.json");
    let r = cli(
        &[
            "score",
            "--store",
            s(&store),
            "--out",
            s(&scores),
            "--tasks",
            s(&common::tasks_dir()),
        ],
        &answers,
    );
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("invalid input `7`"));
    assert!(r.out.contains("instruction: "));
    let r = cli(
        &[
            "report",
            "--store",
            s(&store),
            "--scores",
            s(&scores),
            "--scope",
            "t1-t6",
        ],
        "",
    );
    assert!(
        r.out
            .contains("| gemma4:e2b | model-only | 0.958 (23/24) / 0.958 (23/24) ✓ | — |"),
        "{}",
        r.out
    );

    let check = cli(
        &[
            "score",
            "--store",
            s(&store),
            "--out",
            s(&dir.path().join("copy.json")),
            "--input",
            s(&scores),
        ],
        "",
    );
    assert_eq!(check.code, 0, "{}", check.err);
}

#[test]
fn validate_reports_conformance() {
    let r = cli(&["validate", "--tasks", s(&common::tasks_dir())], "");
    assert_eq!(r.code, 0);
    assert!(r.out.contains("24 tasks (T1:4 T2:4 T3:4 T4:4 T5:5 T6:3)"), "{}", r.out);
    assert!(r.out.contains("conformant"));

    let dir = tempfile::tempdir().unwrap();
    let r = cli(&["validate", "--tasks", s(dir.path())], "");
    assert_eq!(r.code, 1);
    assert!(r.out.contains("deviation: task set is empty"), "{}", r.out);
    let r = cli(&["validate", "--tasks", s(dir.path()), "--profile", "open"], "");
    assert_eq!(r.code, 0);
}

#[test]
fn bad_arguments_exit_with_usage_error() {
    let r = cli(&["report", "--store", "x", "--scores", "y", "--scope", "t9"], "");
    assert_eq!(r.code, 2);
    let r = cli(&["run", "--config", "c.json", "--conditions", "full-pipeline"], "");
    assert_eq!(r.code, 2);
}
