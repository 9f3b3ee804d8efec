//! Command-line entry point: `run`, `score`, `report`, `ablate`, `validate`.
//! Each command composes library operations; no metric math lives here.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{self, BufRead, Write};
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Duration as ChronoDuration, Utc};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::engine::{Engine, SteppingClock, SystemClock};
use crate::harness::HarnessCondition;
use crate::metrics::{
    build_reports, compute_tsr, contribution_analysis, render_contributions, render_report, ReportFormat, Scope,
};
use crate::scoring::{ingest_interactive, ingest_scores, join, ScoreKey, ScoreSheet, ScoreSource, ScoreValue};
use crate::store::{dedupe_latest, ResultsStore};
use crate::task::{load_task_set, validate_task_set, ConformanceProfile};
use crate::verify::detect_scaffold_collapse;

#[derive(Debug, Parser)]
#[command(
    name = "slm-harness",
    version,
    about = "Run tasks through execution harnesses and score them"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every task once per condition, sequentially, saving each run.
    Run(RunArgs),
    /// Enter rubric scores interactively, or check a score file.
    Score(ScoreArgs),
    /// TSR / VTSR / VCR per model and condition.
    Report(ReportArgs),
    /// Contribution of each pipeline stage from the ablation runs.
    Ablate(AblateArgs),
    /// Check a task directory against a conformance profile.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's model.
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated condition list, e.g. `model-only,pipeline`.
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<HarnessCondition>>,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Fixed start time (RFC 3339); each run advances it by one second.
    #[arg(long)]
    pub fixed_clock: Option<DateTime<Utc>>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Where to write the score file.
    #[arg(long)]
    pub out: PathBuf,
    /// Existing score file to check against the runs instead of prompting.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Task directory, for showing instructions and constraints.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value = "t1-t5")]
    pub scope: Scope,
    #[arg(long, default_value = "text")]
    pub format: ReportFormat,
    /// Task directory; when given, scaffold-collapse candidates are listed.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value = "t1-t6")]
    pub scope: Scope,
    #[arg(long, default_value = "text")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long, default_value = "paper-24")]
    pub profile: ConformanceProfile,
}

type CmdResult = Result<i32, String>;

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run_cli<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a, out, err),
        Command::Score(a) => cmd_score(a, input, out, err),
        Command::Report(a) => cmd_report(a, out, err),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Validate(a) => cmd_validate(a, out),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

fn cmd_run(args: RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| e.to_string())?;
    if let Some(m) = args.model {
        cfg.model = m;
    }
    if let Some(c) = args.conditions {
        cfg.conditions = c;
    }
    if let Some(t) = args.tasks {
        cfg.tasks_dir = t;
    }
    if let Some(s) = args.store {
        cfg.store_root = s;
    }
    if cfg.conditions.is_empty() {
        return Err("no conditions configured".into());
    }

    let tasks = load_task_set(&cfg.tasks_dir).map_err(|e| e.to_string())?;
    let store = ResultsStore::new(&cfg.store_root);
    std::fs::create_dir_all(store.results_dir())
        .map_err(|e| format!("store {} not writable: {e}", store.root().display()))?;
    cfg.check_backend().map_err(|e| e.to_string())?;

    let clock: Arc<dyn crate::engine::Clock> = match args.fixed_clock {
        Some(start) => Arc::new(SteppingClock::new(start, ChronoDuration::seconds(1))),
        None => Arc::new(SystemClock),
    };
    let engine = Engine::new(
        cfg.profile().map_err(|e| e.to_string())?,
        cfg.build_backend().map_err(|e| e.to_string())?,
    )
    .with_options(cfg.options().map_err(|e| e.to_string())?)
    .with_verifier(cfg.verifier.clone())
    .with_templates(cfg.templates().map_err(|e| e.to_string())?)
    .with_tools(cfg.tool_gate.clone(), cfg.build_search().map_err(|e| e.to_string())?)
    .with_clock(clock);

    let result = engine.run_batch(&cfg.conditions, &tasks, &store, |r| {
        let outcome = match &r.final_verdict {
            Some(v) if v.passed => "pass".to_string(),
            Some(v) => format!("fail({})", v.failure_mode.map_or("?", |m| m.as_str())),
            None if r.final_output.is_empty() => "no-output".to_string(),
            None => "done".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<6} {:<20} {:<28} retries={} elapsed={:.1}s",
            r.task_id, r.condition, outcome, r.retry_count, r.total_elapsed_s
        );
        ControlFlow::Continue(())
    });
    match result {
        Ok(ids) => {
            let _ = writeln!(err, "{} runs saved under {}", ids.len(), store.results_dir().display());
            Ok(0)
        }
        Err(e) => Err(e.to_string()),
    }
}

fn load_runs(store: &PathBuf) -> Result<Vec<crate::engine::RunRecord>, String> {
    let runs = ResultsStore::new(store).load_all().map_err(|e| e.to_string())?;
    Ok(dedupe_latest(runs))
}

fn cmd_score(args: ScoreArgs, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let runs = load_runs(&args.store)?;
    let sheet = match &args.input {
        Some(path) => ingest_scores(ScoreSource::File(path), &runs).map_err(|e| e.to_string())?,
        None => {
            if runs.is_empty() {
                return Err(format!("no runs in {}", args.store.display()));
            }
            let tasks = match &args.tasks {
                Some(dir) => Some(load_task_set(dir).map_err(|e| e.to_string())?),
                None => None,
            };
            let session = format!("interactive-{}", Utc::now().format("%Y%m%dT%H%M%SZ"));
            let sheet =
                ingest_interactive(&runs, tasks.as_ref(), input, &mut *out, &session).map_err(|e| e.to_string())?;
            ingest_scores(ScoreSource::Sheet(sheet), &runs).map_err(|e| e.to_string())?
        }
    };
    sheet
        .save(&args.out)
        .map_err(|e| format!("{}: {e}", args.out.display()))?;
    let unscored = sheet.scores.values().filter(|s| !s.value.is_scored()).count();
    let _ = writeln!(
        err,
        "{} scores written to {} ({unscored} unscored)",
        sheet.scores.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_report(args: ReportArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let runs = load_runs(&args.store)?;
    if runs.is_empty() {
        return Err(format!("no runs in {}", args.store.display()));
    }
    let sheet = ingest_scores(ScoreSource::File(&args.scores), &runs).map_err(|e| e.to_string())?;
    let missing: Vec<String> = runs
        .iter()
        .map(ScoreKey::of_run)
        .filter(|k| sheet.get(k) == ScoreValue::Unscored)
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        let _ = writeln!(err, "{} unscored runs (excluded from denominators):", missing.len());
        for k in &missing {
            let _ = writeln!(err, "  {k}");
        }
    }
    let scored = join(&sheet, &runs);
    let reports = build_reports(&scored, &args.scope);
    let _ = write!(out, "{}", render_report(&reports, args.format));

    if let (Some(dir), ReportFormat::Text) = (&args.tasks, args.format) {
        let tasks = load_task_set(dir).map_err(|e| e.to_string())?;
        let collapsed: Vec<String> = runs
            .iter()
            .filter(|r| {
                tasks
                    .get(&r.task_id)
                    .is_some_and(|t| detect_scaffold_collapse(&r.final_output, t))
            })
            .map(|r| ScoreKey::of_run(r).to_string())
            .collect();
        if !collapsed.is_empty() {
            let _ = writeln!(out, "\nScaffold-collapse candidates ({}):", collapsed.len());
            for k in collapsed {
                let _ = writeln!(out, "  {k}");
            }
        }
    }
    Ok(0)
}

fn cmd_ablate(args: AblateArgs, out: &mut dyn Write) -> CmdResult {
    let runs = load_runs(&args.store)?;
    if runs.is_empty() {
        return Err(format!("no runs in {}", args.store.display()));
    }
    let sheet: ScoreSheet = ingest_scores(ScoreSource::File(&args.scores), &runs).map_err(|e| e.to_string())?;
    let scored: Vec<_> = join(&sheet, &runs)
        .into_iter()
        .filter(|s| s.model == args.model)
        .collect();
    let tsr_of = |c: HarnessCondition| {
        let rows: Vec<_> = scored.iter().filter(|s| s.condition == c).cloned().collect();
        compute_tsr(&rows, &args.scope).map_err(|e| format!("{c}: {e}"))
    };
    let baseline = tsr_of(HarnessCondition::ModelOnly)?;
    let full = tsr_of(HarnessCondition::Pipeline)?;
    let mut ablations = BTreeMap::new();
    for c in [
        HarnessCondition::PipelineNoPlan,
        HarnessCondition::PipelineNoVerify,
        HarnessCondition::PipelineNoRecover,
    ] {
        ablations.insert(c.as_str().to_string(), tsr_of(c)?);
    }
    let report = contribution_analysis(baseline, full, &ablations);
    let _ = write!(out, "{}", render_contributions(&report, args.format));
    Ok(0)
}

fn cmd_validate(args: ValidateArgs, out: &mut dyn Write) -> CmdResult {
    let tasks = load_task_set(&args.tasks).map_err(|e| e.to_string())?;
    let report = validate_task_set(&tasks, args.profile);
    let counts: Vec<String> = tasks
        .category_counts()
        .iter()
        .map(|(c, n)| format!("{c}:{n}"))
        .collect();
    let _ = writeln!(out, "{} tasks ({})", tasks.len(), counts.join(" "));
    if report.is_conformant() {
        let _ = writeln!(out, "conformant");
        Ok(0)
    } else {
        for d in &report.deviations {
            let _ = writeln!(out, "deviation: {d}");
        }
        Ok(1)
    }
}

/// Process entry point used by the binary.
pub fn main() -> i32 {
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut out = io::stdout();
    let mut err = io::stderr();
    run_cli(std::env::args_os(), &mut input, &mut out, &mut err)
}
