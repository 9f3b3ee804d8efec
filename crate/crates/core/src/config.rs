//! Declarative batch configuration. Relative paths resolve against the
//! directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::backend::{
    Backend, GenerationOptions, MockBackend, ModelProfile, ModelRegistry, OllamaBackend, ScriptedBehavior,
};
use crate::harness::{HarnessCondition, PromptTemplates};
use crate::search::{DuckDuckGoClient, FixtureSearchClient, NoSearch, SearchClient, ToolGate, DUCKDUCKGO_ENDPOINT};
use crate::verify::VerifierSet;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Ollama-compatible server; URL from `SLM_HARNESS_SERVER_URL`.
    Live,
    Mock {
        script: PathBuf,
    },
}

#[derive(Debug, Clone, Deserialize, PartialEq, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchConfig {
    #[default]
    None,
    Fixture {
        dir: PathBuf,
    },
    Live {
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default = "default_search_timeout")]
        timeout_s: u64,
    },
}

fn default_search_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    /// Inline model profiles; otherwise `models_file`, otherwise built-ins.
    #[serde(default)]
    pub models: Option<Vec<ModelProfile>>,
    #[serde(default)]
    pub models_file: Option<PathBuf>,
    pub conditions: Vec<HarnessCondition>,
    pub tasks_dir: PathBuf,
    pub store_root: PathBuf,
    pub backend: BackendConfig,
    #[serde(default)]
    pub options: GenerationOptions,
    #[serde(default)]
    pub verifier: VerifierSet,
    #[serde(default)]
    pub tool_gate: ToolGate,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub verify_includes_plan: Option<bool>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.tasks_dir);
        fix(&mut self.store_root);
        if let Some(p) = &mut self.models_file {
            fix(p);
        }
        if let Some(p) = &mut self.prompts_dir {
            fix(p);
        }
        if let BackendConfig::Mock { script } = &mut self.backend {
            fix(script);
        }
        if let SearchConfig::Fixture { dir } = &mut self.search {
            fix(dir);
        }
    }

    pub fn registry(&self) -> Result<ModelRegistry, ConfigError> {
        if let Some(models) = &self.models {
            return Ok(ModelRegistry {
                profiles: models.clone(),
            });
        }
        match &self.models_file {
            Some(p) => ModelRegistry::load(p).map_err(ConfigError::Invalid),
            None => Ok(ModelRegistry::default()),
        }
    }

    pub fn profile(&self) -> Result<ModelProfile, ConfigError> {
        let reg = self.registry()?;
        let profile = reg
            .get(&self.model)
            .cloned()
            .ok_or_else(|| ConfigError::Invalid(format!("model `{}` has no profile", self.model)))?;
        if profile.timeout_s <= 0.0 || profile.context_window == 0 {
            return Err(ConfigError::Invalid(format!(
                "model `{}`: timeout and context window must be > 0",
                profile.name
            )));
        }
        Ok(profile)
    }

    pub fn templates(&self) -> Result<PromptTemplates, ConfigError> {
        let mut t = match &self.prompts_dir {
            Some(dir) => PromptTemplates::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => PromptTemplates::default(),
        };
        if let Some(v) = self.verify_includes_plan {
            t.verify_includes_plan = v;
        }
        Ok(t)
    }

    pub fn build_backend(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        match &self.backend {
            BackendConfig::Live => {
                let b = OllamaBackend::from_env().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(Arc::new(b))
            }
            BackendConfig::Mock { script } => {
                let s = ScriptedBehavior::load(script).map_err(ConfigError::Invalid)?;
                Ok(Arc::new(MockBackend::new(s)))
            }
        }
    }

    /// Confirms a live server answers before a batch starts.
    pub fn check_backend(&self) -> Result<(), ConfigError> {
        if self.backend == BackendConfig::Live {
            let b = OllamaBackend::from_env().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            b.ping().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    pub fn build_search(&self) -> Result<Arc<dyn SearchClient>, ConfigError> {
        Ok(match &self.search {
            SearchConfig::None => Arc::new(NoSearch),
            SearchConfig::Fixture { dir } => Arc::new(FixtureSearchClient::new(dir.clone())),
            SearchConfig::Live { endpoint, timeout_s } => Arc::new(
                DuckDuckGoClient::new(
                    endpoint.clone().unwrap_or_else(|| DUCKDUCKGO_ENDPOINT.to_string()),
                    Duration::from_secs(*timeout_s),
                )
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        })
    }

    pub fn options(&self) -> Result<GenerationOptions, ConfigError> {
        let o = self.options;
        if !(0.0..=2.0).contains(&o.temperature) || o.max_new_tokens == 0 {
            return Err(ConfigError::Invalid(
                "options: temperature must be in [0, 2] and max_new_tokens > 0".into(),
            ));
        }
        Ok(o)
    }
}
