//! Web-search tool: live DuckDuckGo client, recorded-fixture client, and
//! per-condition access gating.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::harness::HarnessCondition;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub snippet: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SearchOutcome {
    Results {
        hits: Vec<SearchHit>,
    },
    /// Throttled by the service. Carries the raw HTTP status.
    RateLimited {
        http_status: u16,
    },
    Failed {
        detail: String,
    },
}

impl SearchOutcome {
    pub fn failure_message(&self) -> Option<String> {
        match self {
            SearchOutcome::Results { .. } => None,
            SearchOutcome::RateLimited { http_status } => Some(format!("web search rate-limited (HTTP {http_status})")),
            SearchOutcome::Failed { detail } => Some(format!("web search failed: {detail}")),
        }
    }
}

pub trait SearchClient: Send + Sync {
    /// One request, no internal retries.
    fn query(&self, query: &str) -> SearchOutcome;
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("search query must not be empty")]
pub struct EmptyQuery;

pub fn search(query: &str, client: &dyn SearchClient) -> Result<SearchOutcome, EmptyQuery> {
    let query = query.trim();
    if query.is_empty() {
        return Err(EmptyQuery);
    }
    Ok(client.query(query))
}

/// Interprets an instant-answer response. A 202 (with or without body) and
/// a 429 are throttling; an empty 200 body is also treated as throttling.
pub fn parse_instant_answer(status: u16, body: &str) -> SearchOutcome {
    match status {
        202 | 429 => return SearchOutcome::RateLimited { http_status: status },
        200 if body.trim().is_empty() => return SearchOutcome::RateLimited { http_status: status },
        200 => {}
        other => {
            return SearchOutcome::Failed {
                detail: format!("HTTP {other}"),
            }
        }
    }
    let value: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => {
            return SearchOutcome::Failed {
                detail: format!("unparseable response: {e}"),
            }
        }
    };
    let mut hits = Vec::new();
    let text = |v: &Value, k: &str| v.get(k).and_then(Value::as_str).unwrap_or("").to_string();
    let abstract_text = text(&value, "AbstractText");
    if !abstract_text.is_empty() {
        hits.push(SearchHit {
            title: text(&value, "Heading"),
            snippet: abstract_text,
            url: text(&value, "AbstractURL"),
        });
    }
    fn collect(topics: &[Value], hits: &mut Vec<SearchHit>) {
        for topic in topics {
            if let Some(nested) = topic.get("Topics").and_then(Value::as_array) {
                collect(nested, hits);
                continue;
            }
            let snippet = topic.get("Text").and_then(Value::as_str).unwrap_or("");
            if snippet.is_empty() {
                continue;
            }
            let title = snippet.split(" - ").next().unwrap_or(snippet).to_string();
            hits.push(SearchHit {
                title,
                snippet: snippet.to_string(),
                url: topic.get("FirstURL").and_then(Value::as_str).unwrap_or("").to_string(),
            });
        }
    }
    if let Some(topics) = value.get("RelatedTopics").and_then(Value::as_array) {
        collect(topics, &mut hits);
    }
    SearchOutcome::Results { hits }
}

/// Live DuckDuckGo instant-answer client.
pub struct DuckDuckGoClient {
    endpoint: String,
    client: reqwest::blocking::Client,
}

pub const DUCKDUCKGO_ENDPOINT: &str = "https://api.duckduckgo.com/";

impl DuckDuckGoClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, reqwest::Error> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("slm-harness/", env!("CARGO_PKG_VERSION")))
            .build()?;
        Ok(DuckDuckGoClient {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl SearchClient for DuckDuckGoClient {
    fn query(&self, query: &str) -> SearchOutcome {
        let resp = self
            .client
            .get(&self.endpoint)
            .query(&[
                ("q", query),
                ("format", "json"),
                ("no_html", "1"),
                ("skip_disambig", "1"),
            ])
            .send();
        match resp {
            Ok(resp) => {
                let status = resp.status().as_u16();
                match resp.text() {
                    Ok(body) => parse_instant_answer(status, &body),
                    Err(e) => SearchOutcome::Failed { detail: e.to_string() },
                }
            }
            Err(e) => SearchOutcome::Failed { detail: e.to_string() },
        }
    }
}

/// Hex SHA-256 of the trimmed query; names recorded fixture files.
pub fn query_key(query: &str) -> String {
    let digest = Sha256::digest(query.trim().as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// One recorded response, stored as `<query_key>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedSearch {
    pub query: String,
    pub http_status: u16,
    #[serde(default)]
    pub body: String,
}

/// Replays recorded responses from a directory.
pub struct FixtureSearchClient {
    dir: PathBuf,
}

impl FixtureSearchClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureSearchClient { dir: dir.into() }
    }

    pub fn record(dir: &Path, recorded: &RecordedSearch) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", query_key(&recorded.query)));
        let json = serde_json::to_string_pretty(recorded).map_err(std::io::Error::other)?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }
}

impl SearchClient for FixtureSearchClient {
    fn query(&self, query: &str) -> SearchOutcome {
        let path = self.dir.join(format!("{}.json", query_key(query)));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(_) => {
                return SearchOutcome::Failed {
                    detail: format!("no recorded response for query (expected {})", path.display()),
                }
            }
        };
        match serde_json::from_str::<RecordedSearch>(&text) {
            Ok(rec) => parse_instant_answer(rec.http_status, &rec.body),
            Err(e) => SearchOutcome::Failed {
                detail: format!("{}: {e}", path.display()),
            },
        }
    }
}

/// In-memory scripted client; unknown queries fall back to `default`.
#[derive(Debug, Default)]
pub struct ScriptedSearchClient {
    pub responses: BTreeMap<String, SearchOutcome>,
    pub default: Option<SearchOutcome>,
    queries: Mutex<Vec<String>>,
}

impl ScriptedSearchClient {
    pub fn always(outcome: SearchOutcome) -> Self {
        ScriptedSearchClient {
            default: Some(outcome),
            ..Default::default()
        }
    }

    pub fn queries(&self) -> Vec<String> {
        self.queries.lock().expect("queries").clone()
    }
}

impl SearchClient for ScriptedSearchClient {
    fn query(&self, query: &str) -> SearchOutcome {
        self.queries.lock().expect("queries").push(query.to_string());
        self.responses
            .get(query)
            .or(self.default.as_ref())
            .cloned()
            .unwrap_or_else(|| SearchOutcome::Failed {
                detail: format!("no scripted response for `{query}`"),
            })
    }
}

/// Client that refuses every call; used when no search backend is set up.
pub struct NoSearch;

impl SearchClient for NoSearch {
    fn query(&self, _query: &str) -> SearchOutcome {
        SearchOutcome::Failed {
            detail: "no search client configured".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolAccess {
    None,
    Search,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Search for the pipeline family only.
    #[default]
    Paper,
    /// Identical search access for every condition.
    Redesign,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ToolGate {
    #[serde(default)]
    pub mode: GateMode,
    /// Per-condition overrides, honoured in `paper` mode only.
    #[serde(default)]
    pub overrides: BTreeMap<HarnessCondition, ToolAccess>,
}

impl ToolGate {
    pub fn paper() -> Self {
        ToolGate::default()
    }

    pub fn redesign() -> Self {
        ToolGate {
            mode: GateMode::Redesign,
            overrides: BTreeMap::new(),
        }
    }

    pub fn access(&self, condition: HarnessCondition) -> ToolAccess {
        if tool_allowed(self, condition) {
            ToolAccess::Search
        } else {
            ToolAccess::None
        }
    }
}

pub fn tool_allowed(gate: &ToolGate, condition: HarnessCondition) -> bool {
    match gate.mode {
        GateMode::Redesign => true,
        GateMode::Paper => match gate.overrides.get(&condition) {
            Some(access) => *access == ToolAccess::Search,
            None => condition.is_pipeline_family(),
        },
    }
}

/// Delimited evidence block for the execute prompt.
pub fn render_evidence(hits: &[SearchHit]) -> String {
    let mut out = String::from("[EVIDENCE]\n");
    if hits.is_empty() {
        out.push_str("(no results)\n");
    }
    for (i, h) in hits.iter().enumerate() {
        let _ = writeln!(out, "{}. {}\n   {}\n   {}", i + 1, h.title, h.snippet, h.url);
    }
    out.push_str("[/EVIDENCE]");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_202_is_rate_limited() {
        assert_eq!(
            parse_instant_answer(202, ""),
            SearchOutcome::RateLimited { http_status: 202 }
        );
        assert_eq!(
            parse_instant_answer(202, "<html>"),
            SearchOutcome::RateLimited { http_status: 202 }
        );
        assert_eq!(
            parse_instant_answer(200, "  "),
            SearchOutcome::RateLimited { http_status: 200 }
        );
        assert!(matches!(parse_instant_answer(500, ""), SearchOutcome::Failed { .. }));
    }

    #[test]
    fn instant_answer_parsing() {
        let body = r#"{
            "Heading": "Rust", "AbstractText": "A language.", "AbstractURL": "https://a",
            "RelatedTopics": [
                {"Text": "Cargo - package manager", "FirstURL": "https://b"},
                {"Name": "Group", "Topics": [{"Text": "rustc - compiler", "FirstURL": "https://c"}]},
                {"Text": ""}
            ]
        }"#;
        let SearchOutcome::Results { hits } = parse_instant_answer(200, body) else {
            panic!("expected results");
        };
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[1].title, "Cargo");
        assert_eq!(hits[2].url, "https://c");
    }

    #[test]
    fn empty_query_rejected() {
        assert_eq!(search("  ", &NoSearch), Err(EmptyQuery));
    }

    #[test]
    fn scripted_passthrough() {
        let hits: Vec<_> = (0..3)
            .map(|i| SearchHit {
                title: format!("t{i}"),
                snippet: "s".into(),
                url: "u".into(),
            })
            .collect();
        let client = ScriptedSearchClient::always(SearchOutcome::Results { hits });
        match search("q", &client).unwrap() {
            SearchOutcome::Results { hits } => assert_eq!(hits.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gating() {
        let paper = ToolGate::paper();
        assert!(!tool_allowed(&paper, HarnessCondition::ModelOnly));
        assert!(!tool_allowed(&paper, HarnessCondition::MinimalShell));
        assert!(tool_allowed(&paper, HarnessCondition::Pipeline));
        assert!(tool_allowed(&paper, HarnessCondition::PipelineNoVerify));
        let redesign = ToolGate::redesign();
        assert!(HarnessCondition::ALL.iter().all(|&c| tool_allowed(&redesign, c)));
        let mut custom = ToolGate::paper();
        custom.overrides.insert(HarnessCondition::ModelOnly, ToolAccess::Search);
        assert!(tool_allowed(&custom, HarnessCondition::ModelOnly));
    }

    #[test]
    fn fixture_client_replays() {
        let dir = tempfile::tempdir().unwrap();
        FixtureSearchClient::record(
            dir.path(),
            &RecordedSearch {
                query: "weather seoul".into(),
                http_status: 202,
                body: String::new(),
            },
        )
        .unwrap();
        let client = FixtureSearchClient::new(dir.path());
        assert_eq!(
            client.query("weather seoul"),
            SearchOutcome::RateLimited { http_status: 202 }
        );
        assert!(matches!(client.query("other"), SearchOutcome::Failed { .. }));
    }

    #[test]
    fn query_key_is_stable() {
        assert_eq!(query_key(" abc "), query_key("abc"));
        assert_eq!(
            query_key("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
