//! Verdicts, the rule-based and model-based verifiers, and the failure
//! taxonomy.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{generate, Backend, GenerationOptions, GenerationOutcome, GenerationRequest, ModelProfile};
use crate::harness::{build_prompt, HarnessCondition, PromptTemplates, StageContext, StageKind};
use crate::task::{ConstraintKind, JsonRoot, JsonShape, Severity, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    IncompleteCompletion,
    FormatViolation,
    GroundingFailure,
    MissingStep,
    ConstraintViolation,
    ScaffoldCollapse,
    Hallucination,
}

impl FailureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureMode::IncompleteCompletion => "incomplete_completion",
            FailureMode::FormatViolation => "format_violation",
            FailureMode::GroundingFailure => "grounding_failure",
            FailureMode::MissingStep => "missing_step",
            FailureMode::ConstraintViolation => "constraint_violation",
            FailureMode::ScaffoldCollapse => "scaffold_collapse",
            FailureMode::Hallucination => "hallucination",
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checker {
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub failure_mode: Option<FailureMode>,
    pub message: String,
    pub checker: Checker,
    /// Constraint kind that produced the failure, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<String>,
}

impl Verdict {
    pub fn pass(checker: Checker) -> Self {
        Verdict {
            passed: true,
            failure_mode: None,
            message: "pass".to_string(),
            checker,
            constraint: None,
        }
    }

    pub fn fail(mode: FailureMode, message: impl Into<String>, checker: Checker) -> Self {
        Verdict {
            passed: false,
            failure_mode: Some(mode),
            message: message.into(),
            checker,
            constraint: None,
        }
    }

    fn on_constraint(mut self, kind: &ConstraintKind) -> Self {
        self.constraint = Some(kind.name().to_string());
        self
    }
}

/// Characters as counted for `char_limit`: Unicode scalar values of the
/// trimmed output.
pub fn count_chars(output: &str) -> usize {
    output.trim().chars().count()
}

/// Parses the output as JSON, also accepting a single fenced code block.
pub fn extract_json(output: &str) -> Option<Value> {
    let trimmed = output.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    let body = trimmed.strip_prefix("```")?.strip_suffix("```")?;
    let body = body.strip_prefix("json").unwrap_or(body);
    serde_json::from_str(body.trim()).ok()
}

fn check_json_shape(output: &str, shape: &JsonShape) -> Result<(), String> {
    let value = extract_json(output).ok_or_else(|| "output is not valid JSON".to_string())?;
    let missing = |obj: &serde_json::Map<String, Value>| {
        shape
            .required_keys
            .iter()
            .find(|k| !obj.contains_key(k.as_str()))
            .cloned()
    };
    match (shape.root, &value) {
        (JsonRoot::Object, Value::Object(obj)) => match missing(obj) {
            Some(k) => Err(format!("JSON object missing key `{k}`")),
            None => Ok(()),
        },
        (JsonRoot::Array, Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                match item {
                    Value::Object(obj) => {
                        if let Some(k) = missing(obj) {
                            return Err(format!("JSON array element {i} missing key `{k}`"));
                        }
                    }
                    _ if shape.required_keys.is_empty() => {}
                    _ => return Err(format!("JSON array element {i} is not an object")),
                }
            }
            Ok(())
        }
        (JsonRoot::Object, _) => Err(format!("expected a JSON object, found {}", json_kind(&value))),
        (JsonRoot::Array, _) => Err(format!("expected a JSON array, found {}", json_kind(&value))),
    }
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn check_steps(output: &str, steps: &[String]) -> Result<(), String> {
    let haystack = output.to_lowercase();
    let mut cursor = 0;
    for step in steps {
        let needle = step.to_lowercase();
        match haystack[cursor..].find(&needle) {
            Some(pos) => cursor += pos + needle.len(),
            None if haystack.contains(&needle) => {
                return Err(format!("step '{step}' out of order"));
            }
            None => return Err(format!("missing step '{step}'")),
        }
    }
    Ok(())
}

fn find_prohibited<'a>(output: &str, words: &'a [String]) -> Option<&'a str> {
    let haystack = output.to_lowercase();
    words
        .iter()
        .map(|w| w.trim())
        .find(|w| !w.is_empty() && haystack.contains(&w.to_lowercase()))
}

/// Rule checks in fixed order: emptiness, JSON structure, required steps,
/// prohibited words, character limit. The first hard failure wins.
pub fn verify_rules(output: &str, task: &TaskSpec) -> Verdict {
    if output.trim().is_empty() {
        return Verdict::fail(FailureMode::IncompleteCompletion, "empty output", Checker::Rule);
    }
    let hard = || {
        task.constraints
            .iter()
            .filter(|c| c.severity == Severity::Hard)
            .map(|c| &c.kind)
    };
    for kind in hard() {
        if let ConstraintKind::JsonStructure { schema } = kind {
            if let Err(msg) = check_json_shape(output, schema) {
                return Verdict::fail(FailureMode::FormatViolation, msg, Checker::Rule).on_constraint(kind);
            }
        }
    }
    for kind in hard() {
        if let ConstraintKind::RequiredSteps { steps } = kind {
            if let Err(msg) = check_steps(output, steps) {
                return Verdict::fail(FailureMode::MissingStep, msg, Checker::Rule).on_constraint(kind);
            }
        }
    }
    for kind in hard() {
        if let ConstraintKind::ProhibitedWords { words } = kind {
            if let Some(w) = find_prohibited(output, words) {
                return Verdict::fail(
                    FailureMode::ConstraintViolation,
                    format!("prohibited word '{w}' present"),
                    Checker::Rule,
                )
                .on_constraint(kind);
            }
        }
    }
    for kind in hard() {
        if let ConstraintKind::CharLimit { max } = kind {
            let n = count_chars(output);
            if n > *max as usize {
                return Verdict::fail(
                    FailureMode::ConstraintViolation,
                    format!("character count {n} > {max}"),
                    Checker::Rule,
                )
                .on_constraint(kind);
            }
        }
    }
    Verdict::pass(Checker::Rule)
}

/// Ordered keyword → failure mode lookup for model verdict reasons. The
/// first keyword found (case-insensitive) decides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeywordTable(pub Vec<(String, FailureMode)>);

impl Default for KeywordTable {
    fn default() -> Self {
        use FailureMode::*;
        let rows: &[(&str, FailureMode)] = &[
            ("timed out", IncompleteCompletion),
            ("timeout", IncompleteCompletion),
            ("incomplete", IncompleteCompletion),
            ("truncated", IncompleteCompletion),
            ("empty", IncompleteCompletion),
            ("step", MissingStep),
            ("json", FormatViolation),
            ("format", FormatViolation),
            ("structure", FormatViolation),
            ("character", ConstraintViolation),
            ("length", ConstraintViolation),
            ("too long", ConstraintViolation),
            ("limit", ConstraintViolation),
            ("prohibited", ConstraintViolation),
            ("forbidden", ConstraintViolation),
            ("hallucinat", Hallucination),
            ("fabricat", Hallucination),
            ("ground", GroundingFailure),
            ("source", GroundingFailure),
            ("document", GroundingFailure),
            ("citation", GroundingFailure),
        ];
        KeywordTable(rows.iter().map(|(k, m)| (k.to_string(), *m)).collect())
    }
}

impl KeywordTable {
    pub fn classify(&self, reason: &str) -> FailureMode {
        let reason = reason.to_lowercase();
        self.0
            .iter()
            .find(|(k, _)| reason.contains(&k.to_lowercase()))
            .map(|(_, m)| *m)
            .unwrap_or(FailureMode::FormatViolation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedVerdict {
    Pass,
    Fail(String),
}

/// Finds the last `VERDICT:` line. `None` when no such line parses.
pub fn parse_verdict_line(reply: &str) -> Option<ParsedVerdict> {
    let line = reply
        .lines()
        .map(|l| l.trim().trim_matches(|c| c == '*' || c == '`').trim())
        .rfind(|l| l.starts_with("VERDICT:"))?;
    let rest = line["VERDICT:".len()..].trim();
    let upper = rest.to_ascii_uppercase();
    if upper.starts_with("PASS") {
        let tail = rest[4..].trim();
        return tail
            .chars()
            .all(|c| c.is_ascii_punctuation())
            .then_some(ParsedVerdict::Pass);
    }
    if upper.starts_with("FAIL") {
        let reason = rest[4..]
            .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '—' | '–' | '-' | ':'))
            .trim();
        let reason = if reason.is_empty() { "unspecified" } else { reason };
        return Some(ParsedVerdict::Fail(reason.to_string()));
    }
    None
}

/// Turns a verifier reply into a verdict. Anything other than a parsed
/// PASS sentinel fails.
pub fn verdict_from_reply(reply: &str, keywords: &KeywordTable) -> Verdict {
    match parse_verdict_line(reply) {
        Some(ParsedVerdict::Pass) => Verdict::pass(Checker::Llm),
        Some(ParsedVerdict::Fail(reason)) => {
            let mode = keywords.classify(&reason);
            let lower = reason.to_lowercase();
            let mut v = Verdict::fail(mode, reason, Checker::Llm);
            if mode == FailureMode::ConstraintViolation
                && (lower.contains("char") || lower.contains("length") || lower.contains("too long"))
            {
                v.constraint = Some("char_limit".to_string());
            }
            v
        }
        None => Verdict::fail(
            FailureMode::FormatViolation,
            "verifier verdict unparseable",
            Checker::Llm,
        ),
    }
}

/// What a model-based check needs to make its call.
#[derive(Clone, Copy)]
pub struct LlmContext<'a> {
    pub backend: &'a dyn Backend,
    pub profile: &'a ModelProfile,
    pub options: &'a GenerationOptions,
    pub templates: &'a PromptTemplates,
    /// Execute attempt being checked; tags the verifier call.
    pub attempt: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmCheck {
    pub verdict: Verdict,
    pub prompt: String,
    pub outcome: GenerationOutcome,
}

pub fn verify_llm(
    output: &str,
    task: &TaskSpec,
    plan: Option<&str>,
    llm: LlmContext<'_>,
    keywords: &KeywordTable,
) -> LlmCheck {
    let ctx = StageContext {
        plan: plan.map(str::to_string),
        prior_output: Some(output.to_string()),
        ..Default::default()
    };
    let prompt = build_prompt(llm.templates, HarnessCondition::Pipeline, StageKind::Verify, task, &ctx)
        .expect("verify is part of the pipeline sequence");
    let request = GenerationRequest::new(llm.profile, llm.options, prompt.clone()).tagged(
        &task.id,
        StageKind::Verify,
        llm.attempt,
    );
    let outcome = match generate(llm.backend, &request) {
        Ok(o) => o,
        Err(e) => GenerationOutcome::TransportError { detail: e.to_string() },
    };
    let verdict = match &outcome {
        GenerationOutcome::Completed { text, .. } => verdict_from_reply(text, keywords),
        GenerationOutcome::TimedOut { elapsed_s } => Verdict::fail(
            FailureMode::IncompleteCompletion,
            format!("verifier timed out after {elapsed_s:.0}s"),
            Checker::Llm,
        ),
        GenerationOutcome::TransportError { detail } => Verdict::fail(
            FailureMode::IncompleteCompletion,
            format!("verifier call failed: {detail}"),
            Checker::Llm,
        ),
    };
    LlmCheck {
        verdict,
        prompt,
        outcome,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VerifierMode {
    RulesOnly,
    #[default]
    LlmOnly,
    /// Rules first; the model verifier runs only when the rules pass.
    RuleThenLlm,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerifierSet {
    #[serde(default)]
    pub mode: VerifierMode,
    #[serde(default)]
    pub keywords: KeywordTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyResult {
    pub verdict: Verdict,
    pub prompt: Option<String>,
    pub outcome: Option<GenerationOutcome>,
}

impl VerifierSet {
    pub fn rules_only() -> Self {
        VerifierSet {
            mode: VerifierMode::RulesOnly,
            ..Default::default()
        }
    }

    pub fn llm_only() -> Self {
        VerifierSet::default()
    }

    pub fn rule_then_llm() -> Self {
        VerifierSet {
            mode: VerifierMode::RuleThenLlm,
            ..Default::default()
        }
    }

    pub fn verify(&self, output: &str, task: &TaskSpec, plan: Option<&str>, llm: LlmContext<'_>) -> VerifyResult {
        let via_llm = || {
            let check = verify_llm(output, task, plan, llm, &self.keywords);
            VerifyResult {
                verdict: check.verdict,
                prompt: Some(check.prompt),
                outcome: Some(check.outcome),
            }
        };
        let by_rules = || VerifyResult {
            verdict: verify_rules(output, task),
            prompt: None,
            outcome: None,
        };
        match self.mode {
            VerifierMode::RulesOnly => by_rules(),
            VerifierMode::LlmOnly => via_llm(),
            VerifierMode::RuleThenLlm => {
                let rules = by_rules();
                if rules.verdict.passed {
                    via_llm()
                } else {
                    rules
                }
            }
        }
    }
}

/// How a failure can be remediated by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixabilityClass {
    /// Recovery retry absorbs it (timeouts, empty output).
    ReactiveFixable,
    /// The verify → recover loop catches and repairs it.
    LoopFixable,
    /// Needs up-front structure (planning, prompt scaffolding).
    ProactiveFixable,
    PartiallyFixable,
    /// Model limit: hallucination, or counting the model cannot do itself.
    Unfixable,
}

impl FixabilityClass {
    pub fn symbol(self) -> &'static str {
        match self {
            FixabilityClass::ReactiveFixable | FixabilityClass::LoopFixable | FixabilityClass::ProactiveFixable => "✓",
            FixabilityClass::PartiallyFixable => "△",
            FixabilityClass::Unfixable => "×",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FailureContext {
    /// The task carries a character limit. Used when the verdict does not
    /// name the violated constraint.
    pub task_has_char_limit: bool,
}

impl FailureContext {
    pub fn for_task(task: &TaskSpec) -> Self {
        FailureContext {
            task_has_char_limit: task.char_limit().is_some(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("cannot classify a passing verdict")]
pub struct PassingVerdict;

pub fn classify_failure(verdict: &Verdict, context: &FailureContext) -> Result<FixabilityClass, PassingVerdict> {
    let mode = match (verdict.passed, verdict.failure_mode) {
        (false, Some(mode)) => mode,
        _ => return Err(PassingVerdict),
    };
    Ok(match mode {
        FailureMode::IncompleteCompletion => FixabilityClass::ReactiveFixable,
        FailureMode::ScaffoldCollapse => FixabilityClass::ProactiveFixable,
        FailureMode::FormatViolation | FailureMode::GroundingFailure | FailureMode::MissingStep => {
            FixabilityClass::PartiallyFixable
        }
        FailureMode::Hallucination => FixabilityClass::Unfixable,
        FailureMode::ConstraintViolation => {
            let quantitative = match verdict.constraint.as_deref() {
                Some(kind) => kind == "char_limit",
                None => context.task_has_char_limit,
            };
            match verdict.checker {
                Checker::Llm if quantitative => FixabilityClass::Unfixable,
                _ => FixabilityClass::LoopFixable,
            }
        }
    })
}

/// Post-hoc label: JSON was required but the output is non-empty prose that
/// does not parse as JSON.
pub fn detect_scaffold_collapse(output: &str, task: &TaskSpec) -> bool {
    task.expects_json() && !output.trim().is_empty() && extract_json(output).is_none()
}
