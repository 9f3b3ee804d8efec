//! Text-generation backends: an Ollama-compatible HTTP client and a
//! scripted mock used by tests and dry runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::StageKind;

/// Environment variable holding the model server base URL.
pub const SERVER_URL_ENV: &str = "SLM_HARNESS_SERVER_URL";
pub const DEFAULT_SERVER_URL: &str = "http://127.0.0.1:11434";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
}

fn default_temperature() -> f64 {
    0.1
}

fn default_max_new_tokens() -> u32 {
    2048
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            temperature: default_temperature(),
            max_new_tokens: default_max_new_tokens(),
        }
    }
}

/// Per-model inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub context_window: u32,
    pub timeout_s: f64,
}

impl ModelProfile {
    pub fn new(name: impl Into<String>, context_window: u32, timeout_s: f64) -> Self {
        ModelProfile {
            name: name.into(),
            context_window,
            timeout_s,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s.max(0.0))
    }
}

/// Named model profiles, loadable from a JSON list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelRegistry {
    pub profiles: Vec<ModelProfile>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        ModelRegistry {
            profiles: vec![
                ModelProfile::new("gemma4:e2b", 8192, 300.0),
                ModelProfile::new("qwen3.5:2b", 4096, 300.0),
                ModelProfile::new("llama3.2:latest", 8192, 600.0),
            ],
        }
    }
}

impl ModelRegistry {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn get(&self, name: &str) -> Option<&ModelProfile> {
        self.profiles.iter().find(|p| p.name == name)
    }
}

/// Identifies a call for scripted backends. Live backends ignore it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallTag {
    pub task_id: String,
    pub stage: StageKind,
    /// Execute attempt within the run: 0 for the first pass, 1.. for
    /// recovery re-runs and their verification.
    pub attempt: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub model_name: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub context_window: u32,
    pub timeout: Duration,
    pub tag: Option<CallTag>,
}

impl GenerationRequest {
    pub fn new(profile: &ModelProfile, options: &GenerationOptions, prompt: String) -> Self {
        GenerationRequest {
            model_name: profile.name.clone(),
            prompt,
            temperature: options.temperature,
            max_new_tokens: options.max_new_tokens,
            context_window: profile.context_window,
            timeout: profile.timeout(),
            tag: None,
        }
    }

    pub fn tagged(mut self, task_id: &str, stage: StageKind, attempt: u8) -> Self {
        self.tag = Some(CallTag {
            task_id: task_id.to_string(),
            stage,
            attempt,
        });
        self
    }

    pub fn validate(&self) -> Result<(), InvalidRequest> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(InvalidRequest("max_new_tokens must be > 0".into()));
        }
        if self.timeout.is_zero() {
            return Err(InvalidRequest("timeout must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invalid generation request: {0}")]
pub struct InvalidRequest(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GenerationOutcome {
    Completed { text: String, elapsed_s: f64 },
    TimedOut { elapsed_s: f64 },
    TransportError { detail: String },
}

impl GenerationOutcome {
    pub fn elapsed_s(&self) -> f64 {
        match self {
            GenerationOutcome::Completed { elapsed_s, .. } | GenerationOutcome::TimedOut { elapsed_s } => *elapsed_s,
            GenerationOutcome::TransportError { .. } => 0.0,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            GenerationOutcome::Completed { text, .. } => Some(text),
            _ => None,
        }
    }

    /// Applies the timeout bound so that a completion at or past the limit
    /// is reported as a timeout.
    fn bounded(self, timeout: Duration) -> Self {
        let limit = timeout.as_secs_f64();
        match self {
            GenerationOutcome::Completed { elapsed_s, .. } if elapsed_s >= limit => {
                GenerationOutcome::TimedOut { elapsed_s }
            }
            GenerationOutcome::TimedOut { elapsed_s } => GenerationOutcome::TimedOut {
                elapsed_s: elapsed_s.max(limit),
            },
            other => other,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Performs one generation. Callers go through [`generate`], which
    /// checks the request first.
    fn call(&self, request: &GenerationRequest) -> GenerationOutcome;
}

pub fn generate(backend: &dyn Backend, request: &GenerationRequest) -> Result<GenerationOutcome, InvalidRequest> {
    request.validate()?;
    Ok(backend.call(request).bounded(request.timeout))
}

/// Client for the Ollama `/api/generate` endpoint. Streaming is off, so
/// the timeout bounds the whole call.
pub struct OllamaBackend {
    base_url: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct OllamaGenerateBody<'a> {
    model: &'a str,
    prompt: &'a str,
    stream: bool,
    options: OllamaOptions,
}

#[derive(Serialize)]
struct OllamaOptions {
    temperature: f64,
    num_predict: u32,
    num_ctx: u32,
}

#[derive(Deserialize)]
struct OllamaGenerateReply {
    response: String,
}

impl OllamaBackend {
    pub fn new(base_url: impl Into<String>) -> Result<Self, reqwest::Error> {
        let client = reqwest::blocking::Client::builder().build()?;
        Ok(OllamaBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    /// Uses `SLM_HARNESS_SERVER_URL`, falling back to the local default.
    pub fn from_env() -> Result<Self, reqwest::Error> {
        let url = std::env::var(SERVER_URL_ENV).unwrap_or_else(|_| DEFAULT_SERVER_URL.to_string());
        Self::new(url)
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// Any HTTP answer from the base URL counts as reachable.
    pub fn ping(&self) -> Result<(), String> {
        self.client
            .get(&self.base_url)
            .timeout(Duration::from_secs(5))
            .send()
            .map(|_| ())
            .map_err(|e| format!("model server {} unreachable: {e}", self.base_url))
    }
}

impl Backend for OllamaBackend {
    fn call(&self, request: &GenerationRequest) -> GenerationOutcome {
        let body = OllamaGenerateBody {
            model: &request.model_name,
            prompt: &request.prompt,
            stream: false,
            options: OllamaOptions {
                temperature: request.temperature,
                num_predict: request.max_new_tokens,
                num_ctx: request.context_window,
            },
        };
        let started = Instant::now();
        let elapsed = || started.elapsed().as_secs_f64();
        let result = self
            .client
            .post(format!("{}/api/generate", self.base_url))
            .timeout(request.timeout)
            .json(&body)
            .send()
            .and_then(|resp| resp.error_for_status())
            .and_then(|resp| resp.json::<OllamaGenerateReply>());
        match result {
            Ok(reply) => GenerationOutcome::Completed {
                text: reply.response,
                elapsed_s: elapsed(),
            },
            Err(e) if e.is_timeout() => GenerationOutcome::TimedOut { elapsed_s: elapsed() },
            Err(e) => GenerationOutcome::TransportError { detail: e.to_string() },
        }
    }
}

/// One scripted response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedResponse {
    Reply {
        text: String,
        #[serde(default = "default_simulated_elapsed")]
        elapsed_s: f64,
    },
    Timeout,
    TransportError(String),
}

fn default_simulated_elapsed() -> f64 {
    1.0
}

impl ScriptedResponse {
    pub fn reply(text: impl Into<String>, elapsed_s: f64) -> Self {
        ScriptedResponse::Reply {
            text: text.into(),
            elapsed_s,
        }
    }
}

/// Per-stage response lists for one task. Recovery re-runs consume the
/// `execute` list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageScript {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plan: Vec<ScriptedResponse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub execute: Vec<ScriptedResponse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verify: Vec<ScriptedResponse>,
}

impl StageScript {
    fn list(&self, stage: StageKind) -> &[ScriptedResponse] {
        match stage {
            StageKind::Plan => &self.plan,
            StageKind::Execute | StageKind::Recover => &self.execute,
            StageKind::Verify => &self.verify,
        }
    }
}

/// Fallback responses for stages a task script does not cover.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageDefaults {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<ScriptedResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execute: Option<ScriptedResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<ScriptedResponse>,
}

impl StageDefaults {
    fn get(&self, stage: StageKind) -> Option<&ScriptedResponse> {
        match stage {
            StageKind::Plan => self.plan.as_ref(),
            StageKind::Execute | StageKind::Recover => self.execute.as_ref(),
            StageKind::Verify => self.verify.as_ref(),
        }
    }
}

/// Script for [`MockBackend`]: responses keyed by task id, stage and
/// attempt index (the position in the list). A list that runs out keeps
/// repeating its last entry. Because the key is the attempt within a run,
/// every run of a task replays the same script.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBehavior {
    #[serde(default)]
    pub defaults: StageDefaults,
    #[serde(default)]
    pub tasks: BTreeMap<String, StageScript>,
}

impl ScriptedBehavior {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn with_execute(mut self, task_id: &str, responses: Vec<ScriptedResponse>) -> Self {
        self.tasks.entry(task_id.to_string()).or_default().execute = responses;
        self
    }

    pub fn with_plan(mut self, task_id: &str, responses: Vec<ScriptedResponse>) -> Self {
        self.tasks.entry(task_id.to_string()).or_default().plan = responses;
        self
    }

    pub fn with_verify(mut self, task_id: &str, responses: Vec<ScriptedResponse>) -> Self {
        self.tasks.entry(task_id.to_string()).or_default().verify = responses;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub task_id: Option<String>,
    pub stage: Option<StageKind>,
    pub prompt: String,
}

/// Deterministic scripted backend. Never sleeps; elapsed times are the
/// scripted values.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: ScriptedBehavior,
    state: Mutex<MockState>,
}

#[derive(Debug, Default)]
struct MockState {
    calls: Vec<RecordedCall>,
}

impl MockBackend {
    pub fn new(script: ScriptedBehavior) -> Self {
        MockBackend {
            script,
            state: Mutex::default(),
        }
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.state.lock().expect("mock state").calls.clone()
    }

    /// Clears the call log.
    pub fn reset(&self) {
        *self.state.lock().expect("mock state") = MockState::default();
    }

    fn next(&self, tag: &CallTag) -> Option<ScriptedResponse> {
        let attempt = usize::from(tag.attempt);
        let scripted = self
            .script
            .tasks
            .get(&tag.task_id)
            .map(|s| s.list(tag.stage))
            .filter(|l| !l.is_empty());
        match scripted {
            Some(list) => Some(list[attempt.min(list.len() - 1)].clone()),
            None => self.script.defaults.get(tag.stage).cloned(),
        }
    }
}

impl Backend for MockBackend {
    fn call(&self, request: &GenerationRequest) -> GenerationOutcome {
        {
            let mut state = self.state.lock().expect("mock state");
            state.calls.push(RecordedCall {
                task_id: request.tag.as_ref().map(|t| t.task_id.clone()),
                stage: request.tag.as_ref().map(|t| t.stage),
                prompt: request.prompt.clone(),
            });
        }
        let Some(tag) = &request.tag else {
            return GenerationOutcome::TransportError {
                detail: "mock backend requires a call tag".into(),
            };
        };
        match self.next(tag) {
            Some(ScriptedResponse::Reply { text, elapsed_s }) => GenerationOutcome::Completed { text, elapsed_s },
            Some(ScriptedResponse::Timeout) => GenerationOutcome::TimedOut {
                elapsed_s: request.timeout.as_secs_f64(),
            },
            Some(ScriptedResponse::TransportError(detail)) => GenerationOutcome::TransportError { detail },
            None => GenerationOutcome::TransportError {
                detail: format!("no scripted response for {} {}", tag.task_id, tag.stage),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(task: &str, stage: StageKind) -> GenerationRequest {
        attempt(task, stage, 0)
    }

    fn attempt(task: &str, stage: StageKind, n: u8) -> GenerationRequest {
        GenerationRequest::new(
            &ModelProfile::new("gemma4:e2b", 8192, 300.0),
            &GenerationOptions::default(),
            "prompt".into(),
        )
        .tagged(task, stage, n)
    }

    #[test]
    fn scripted_sequence_replays() {
        let script = ScriptedBehavior::default().with_execute(
            "T4-01",
            vec![ScriptedResponse::Timeout, ScriptedResponse::reply("ok", 12.0)],
        );
        let mock = MockBackend::new(script);
        assert_eq!(
            generate(&mock, &attempt("T4-01", StageKind::Execute, 0)).unwrap(),
            GenerationOutcome::TimedOut { elapsed_s: 300.0 }
        );
        assert_eq!(
            generate(&mock, &attempt("T4-01", StageKind::Execute, 1)).unwrap(),
            GenerationOutcome::Completed {
                text: "ok".into(),
                elapsed_s: 12.0
            }
        );
        // exhausted lists repeat their last entry
        assert_eq!(
            generate(&mock, &attempt("T4-01", StageKind::Execute, 2))
                .unwrap()
                .text(),
            Some("ok")
        );
        // recovery prompts draw from the execute list
        assert_eq!(
            generate(&mock, &attempt("T4-01", StageKind::Recover, 1))
                .unwrap()
                .text(),
            Some("ok")
        );
        assert_eq!(mock.calls().len(), 4);
    }

    #[test]
    fn replay_is_deterministic() {
        let script = ScriptedBehavior::default()
            .with_execute(
                "T1-01",
                vec![
                    ScriptedResponse::TransportError("refused".into()),
                    ScriptedResponse::Timeout,
                    ScriptedResponse::reply("a", 2.0),
                ],
            )
            .with_verify("T1-01", vec![ScriptedResponse::reply("VERDICT: PASS", 1.0)]);
        let run = |mock: &MockBackend| -> Vec<GenerationOutcome> {
            (0..4)
                .flat_map(|n| {
                    [
                        generate(mock, &attempt("T1-01", StageKind::Execute, n)).unwrap(),
                        generate(mock, &attempt("T1-01", StageKind::Verify, n)).unwrap(),
                    ]
                })
                .collect()
        };
        let mock = MockBackend::new(script.clone());
        let first = run(&mock);
        assert_eq!(first, run(&mock));
        mock.reset();
        assert!(mock.calls().is_empty());
        assert_eq!(first, run(&MockBackend::new(script)));
    }

    #[test]
    fn zero_timeout_rejected() {
        let mut req = request("T1-01", StageKind::Execute);
        req.timeout = Duration::ZERO;
        assert!(generate(&MockBackend::default(), &req).is_err());
        let mut req = request("T1-01", StageKind::Execute);
        req.temperature = 2.5;
        assert!(req.validate().is_err());
        req.temperature = 0.1;
        req.max_new_tokens = 0;
        assert!(req.validate().is_err());
    }

    #[test]
    fn slow_reply_becomes_timeout() {
        let script = ScriptedBehavior::default().with_execute("T1-01", vec![ScriptedResponse::reply("late", 400.0)]);
        let out = generate(&MockBackend::new(script), &request("T1-01", StageKind::Execute)).unwrap();
        assert_eq!(out, GenerationOutcome::TimedOut { elapsed_s: 400.0 });
    }

    #[test]
    fn defaults_cover_unscripted_stages() {
        let script = ScriptedBehavior {
            defaults: StageDefaults {
                plan: Some(ScriptedResponse::reply("1. answer", 1.0)),
                ..Default::default()
            },
            ..Default::default()
        };
        let mock = MockBackend::new(script);
        assert_eq!(
            generate(&mock, &request("T2-01", StageKind::Plan)).unwrap().text(),
            Some("1. answer")
        );
        assert!(matches!(
            generate(&mock, &request("T2-01", StageKind::Execute)).unwrap(),
            GenerationOutcome::TransportError { .. }
        ));
    }

    #[test]
    fn script_file_format() {
        let json = r#"{
            "defaults": {"verify": {"reply": {"text": "VERDICT: PASS"}}},
            "tasks": {"T4-01": {"execute": ["timeout", {"reply": {"text": "ok", "elapsed_s": 12}}]}}
        }"#;
        let script: ScriptedBehavior = serde_json::from_str(json).unwrap();
        assert_eq!(
            script.tasks["T4-01"].execute,
            vec![ScriptedResponse::Timeout, ScriptedResponse::reply("ok", 12.0)]
        );
        assert_eq!(
            script.defaults.verify,
            Some(ScriptedResponse::reply("VERDICT: PASS", 1.0))
        );
    }

    #[test]
    fn default_registry_profiles() {
        let reg = ModelRegistry::default();
        assert_eq!(reg.get("qwen3.5:2b").unwrap().context_window, 4096);
        assert_eq!(reg.get("llama3.2:latest").unwrap().timeout_s, 600.0);
        assert_eq!(reg.get("gemma4:e2b").unwrap().timeout_s, 300.0);
        let opts = GenerationOptions::default();
        assert_eq!((opts.temperature, opts.max_new_tokens), (0.1, 2048));
    }
}
