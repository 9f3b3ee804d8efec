//! Runs one task through a harness condition as a small state machine and
//! records the full trace. Batches run strictly one call at a time.

use std::ops::ControlFlow;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use chrono::{DateTime, Duration as ChronoDuration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{generate, Backend, GenerationOptions, GenerationOutcome, GenerationRequest, ModelProfile};
use crate::harness::{build_prompt, HarnessCondition, PromptTemplates, StageContext, StageKind};
use crate::search::{render_evidence, search, tool_allowed, NoSearch, SearchClient, SearchOutcome, ToolGate};
use crate::store::{ResultsStore, StoreError};
use crate::task::{TaskSet, TaskSpec};
use crate::verify::{Checker, FailureMode, LlmContext, Verdict, VerifierSet};

/// Recovery re-runs allowed per task.
pub const MAX_RETRIES: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub query: String,
    pub outcome: SearchOutcome,
}

/// One stage execution. Recovery re-runs are recorded as `execute` with
/// `attempt > 0`. Rule-only verification has no prompt or outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageKind,
    pub attempt: u8,
    pub prompt: Option<String>,
    pub outcome: Option<GenerationOutcome>,
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCallRecord>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    #[serde(rename = "model")]
    pub model_name: String,
    pub condition: HarnessCondition,
    pub task_id: String,
    #[serde(with = "millis_timestamp")]
    pub timestamp: DateTime<Utc>,
    pub total_elapsed_s: f64,
    pub retry_count: u8,
    pub final_output: String,
    pub final_verdict: Option<Verdict>,
    pub trace: Vec<StageRecord>,
}

impl RunRecord {
    pub fn execute_attempts(&self) -> usize {
        self.trace.iter().filter(|s| s.stage == StageKind::Execute).count()
    }
}

mod millis_timestamp {
    use chrono::{DateTime, NaiveDateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    const FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.3fZ";

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format(FORMAT).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        NaiveDateTime::parse_from_str(&s, FORMAT)
            .map(|n| n.and_utc())
            .map_err(serde::de::Error::custom)
    }
}

/// Truncates to millisecond precision, the resolution persisted on disk.
pub fn to_millis(t: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp_millis(t.timestamp_millis()).expect("timestamp in range")
}

/// `<model>__<condition>__<task>__<basic ISO-8601 UTC>`. Characters outside
/// `[A-Za-z0-9._-]` in the model name become `-` so the id is a portable
/// file name.
pub fn make_run_id(model: &str, condition: HarnessCondition, task_id: &str, t: DateTime<Utc>) -> String {
    let model: String = model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect();
    format!("{model}__{condition}__{task_id}__{}", t.format("%Y%m%dT%H%M%S%.3fZ"))
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock: `start`, `start + step`, `start + 2*step`, ...
pub struct SteppingClock {
    start: DateTime<Utc>,
    step: ChronoDuration,
    ticks: Mutex<i32>,
}

impl SteppingClock {
    pub fn new(start: DateTime<Utc>, step: ChronoDuration) -> Self {
        SteppingClock {
            start,
            step,
            ticks: Mutex::new(0),
        }
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> DateTime<Utc> {
        let mut ticks = self.ticks.lock().expect("clock");
        let t = self.start + self.step * *ticks;
        *ticks += 1;
        t
    }
}

#[derive(Debug, Error)]
#[error("batch aborted after {} runs: {source}", completed.len())]
pub struct BatchError {
    pub completed: Vec<String>,
    #[source]
    pub source: StoreError,
}

pub struct Engine {
    pub profile: ModelProfile,
    pub options: GenerationOptions,
    pub backend: Arc<dyn Backend>,
    pub verifier: VerifierSet,
    pub templates: PromptTemplates,
    pub gate: ToolGate,
    pub search: Arc<dyn SearchClient>,
    pub clock: Arc<dyn Clock>,
}

impl Engine {
    pub fn new(profile: ModelProfile, backend: Arc<dyn Backend>) -> Self {
        Engine {
            profile,
            options: GenerationOptions::default(),
            backend,
            verifier: VerifierSet::default(),
            templates: PromptTemplates::default(),
            gate: ToolGate::default(),
            search: Arc::new(NoSearch),
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_verifier(mut self, verifier: VerifierSet) -> Self {
        self.verifier = verifier;
        self
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_tools(mut self, gate: ToolGate, search: Arc<dyn SearchClient>) -> Self {
        self.gate = gate;
        self.search = search;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_options(mut self, options: GenerationOptions) -> Self {
        self.options = options;
        self
    }

    fn call(&self, prompt: String, task: &TaskSpec, stage: StageKind, attempt: u8) -> GenerationOutcome {
        let request = GenerationRequest::new(&self.profile, &self.options, prompt).tagged(&task.id, stage, attempt);
        generate(self.backend.as_ref(), &request)
            .unwrap_or_else(|e| GenerationOutcome::TransportError { detail: e.to_string() })
    }

    fn prompt(&self, condition: HarnessCondition, stage: StageKind, task: &TaskSpec, ctx: &StageContext) -> String {
        build_prompt(&self.templates, condition, stage, task, ctx)
            .expect("engine only builds prompts for stages in the condition's sequence")
    }

    /// Runs one task. Every failure is absorbed into the returned record.
    pub fn run_task(&self, condition: HarnessCondition, task: &TaskSpec) -> RunRecord {
        let started = Instant::now();
        let timestamp = to_millis(self.clock.now());
        let has_verify = condition.has_stage(StageKind::Verify);
        let can_recover = condition.has_stage(StageKind::Recover);
        let mut trace = Vec::new();

        let mut plan = None;
        if condition.has_stage(StageKind::Plan) {
            let prompt = self.prompt(condition, StageKind::Plan, task, &StageContext::default());
            let outcome = self.call(prompt.clone(), task, StageKind::Plan, 0);
            // A failed plan leaves the plan empty; the run carries on.
            plan = outcome.text().map(str::to_string);
            trace.push(StageRecord {
                stage: StageKind::Plan,
                attempt: 0,
                prompt: Some(prompt),
                elapsed_s: outcome.elapsed_s(),
                outcome: Some(outcome),
                verdict: None,
                tool_call: None,
            });
        }

        let use_tool = task.requires_tool && tool_allowed(&self.gate, condition);
        let mut retry_count = 0u8;
        let mut last_output: Option<String> = None;
        let mut final_verdict: Option<Verdict>;
        let mut failure_message: Option<String> = None;

        loop {
            let attempt = retry_count;
            let mut evidence = None;
            let mut tool_call = None;
            let mut tool_failure = None;
            if use_tool {
                let query = task.instruction.trim().to_string();
                let outcome = search(&query, self.search.as_ref())
                    .unwrap_or_else(|e| SearchOutcome::Failed { detail: e.to_string() });
                match &outcome {
                    SearchOutcome::Results { hits } => evidence = Some(render_evidence(hits)),
                    other => tool_failure = other.failure_message(),
                }
                tool_call = Some(ToolCallRecord { query, outcome });
            }

            if let Some(msg) = tool_failure {
                trace.push(StageRecord {
                    stage: StageKind::Execute,
                    attempt,
                    prompt: None,
                    outcome: None,
                    verdict: None,
                    tool_call,
                    elapsed_s: 0.0,
                });
                final_verdict = Some(Verdict::fail(
                    FailureMode::IncompleteCompletion,
                    msg.clone(),
                    Checker::Rule,
                ));
                failure_message = Some(msg);
            } else {
                let (prompt_stage, ctx) = if attempt == 0 {
                    (
                        StageKind::Execute,
                        StageContext {
                            plan: plan.clone(),
                            evidence,
                            ..Default::default()
                        },
                    )
                } else {
                    (
                        StageKind::Recover,
                        StageContext {
                            plan: plan.clone(),
                            prior_output: Some(last_output.clone().unwrap_or_default()),
                            failure_message: failure_message.clone(),
                            evidence,
                        },
                    )
                };
                let prompt = self.prompt(condition, prompt_stage, task, &ctx);
                let outcome = self.call(prompt.clone(), task, StageKind::Execute, attempt);
                trace.push(StageRecord {
                    stage: StageKind::Execute,
                    attempt,
                    prompt: Some(prompt),
                    elapsed_s: outcome.elapsed_s(),
                    outcome: Some(outcome.clone()),
                    verdict: None,
                    tool_call,
                });

                match outcome {
                    GenerationOutcome::Completed { text, .. } => {
                        last_output = Some(text.clone());
                        if !has_verify {
                            final_verdict = None;
                            break;
                        }
                        let llm = LlmContext {
                            backend: self.backend.as_ref(),
                            profile: &self.profile,
                            options: &self.options,
                            templates: &self.templates,
                            attempt,
                        };
                        let checked = self.verifier.verify(&text, task, plan.as_deref(), llm);
                        trace.push(StageRecord {
                            stage: StageKind::Verify,
                            attempt,
                            prompt: checked.prompt,
                            elapsed_s: checked.outcome.as_ref().map_or(0.0, GenerationOutcome::elapsed_s),
                            outcome: checked.outcome,
                            verdict: Some(checked.verdict.clone()),
                            tool_call: None,
                        });
                        if checked.verdict.passed {
                            final_verdict = Some(checked.verdict);
                            break;
                        }
                        failure_message = Some(checked.verdict.message.clone());
                        final_verdict = Some(checked.verdict);
                    }
                    GenerationOutcome::TimedOut { elapsed_s } => {
                        let msg = format!("previous attempt timed out after {elapsed_s:.0}s");
                        final_verdict = has_verify.then(|| {
                            Verdict::fail(
                                FailureMode::IncompleteCompletion,
                                format!("execution timed out after {elapsed_s:.0}s"),
                                Checker::Rule,
                            )
                        });
                        failure_message = Some(msg);
                    }
                    GenerationOutcome::TransportError { detail } => {
                        let msg = format!("previous attempt failed: {detail}");
                        final_verdict = has_verify
                            .then(|| Verdict::fail(FailureMode::IncompleteCompletion, msg.clone(), Checker::Rule));
                        failure_message = Some(msg);
                    }
                }
            }

            if can_recover && retry_count < MAX_RETRIES {
                retry_count += 1;
            } else {
                break;
            }
        }

        if task.requires_tool && !use_tool {
            final_verdict = Some(Verdict::fail(
                FailureMode::GroundingFailure,
                format!("task requires web search but {condition} has no tool access"),
                Checker::Rule,
            ));
        }

        let stage_total: f64 = trace.iter().map(|s| s.elapsed_s).sum();
        RunRecord {
            run_id: make_run_id(&self.profile.name, condition, &task.id, timestamp),
            model_name: self.profile.name.clone(),
            condition,
            task_id: task.id.clone(),
            timestamp,
            total_elapsed_s: started.elapsed().as_secs_f64().max(stage_total),
            retry_count,
            final_output: last_output.unwrap_or_default(),
            final_verdict,
            trace,
        }
    }

    /// Runs every task once per condition, strictly in sequence, saving
    /// each record before the next task starts. `on_record` sees each
    /// saved record and may stop the batch early.
    pub fn run_batch(
        &self,
        conditions: &[HarnessCondition],
        tasks: &TaskSet,
        store: &ResultsStore,
        mut on_record: impl FnMut(&RunRecord) -> ControlFlow<()>,
    ) -> Result<Vec<String>, BatchError> {
        let mut completed = Vec::new();
        for &condition in conditions {
            for task in tasks {
                let record = self.run_task(condition, task);
                if let Err(source) = store.save_run(&record) {
                    return Err(BatchError { completed, source });
                }
                completed.push(record.run_id.clone());
                if on_record(&record).is_break() {
                    return Ok(completed);
                }
            }
        }
        Ok(completed)
    }
}
