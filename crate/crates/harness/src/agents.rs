//! Agent configuration files and construction of concrete agents.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use qask_core::agent::{
    Oracle, OracleScript, Questioner, QuestionerScript, ReplayQuestioner, ScriptedOracle,
    ScriptedQuestioner,
};
use qask_core::model::{EpisodeResult, EpisodeSpec};
use qask_core::prompt::{OutputFormat, TemplateSet, DEFAULT_TEMPLATE_VERSION};
use serde::{Deserialize, Serialize};

use crate::bridge::{HumanOracle, SessionStore};
use crate::cache::Cache;
use crate::files::read_jsonl;
use crate::images::ImageStore;
use crate::remote::{ChatClient, ChatSettings, GateRegistry, RemoteOracle, RemoteQuestioner, RequestLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Remote,
    Scripted,
    Replay,
    Human,
}

fn default_max_output_tokens() -> u32 {
    512
}

fn default_timeout() -> f64 {
    60.0
}

fn default_template_version() -> String {
    DEFAULT_TEMPLATE_VERSION.to_string()
}

fn default_one() -> u32 {
    1
}

fn default_two() -> u32 {
    2
}

fn default_concurrency() -> usize {
    4
}

fn default_human_timeout() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: String,
    pub kind: AgentKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub format: OutputFormat,
    #[serde(default = "default_template_version")]
    pub template_version: String,
    #[serde(default = "default_one")]
    pub max_parse_retries: u32,
    #[serde(default = "default_two")]
    pub max_transport_retries: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
    #[serde(default)]
    pub cache_unparsed: bool,
    /// Scripted questioner completions.
    #[serde(default)]
    pub questioner_script: Option<QuestionerScript>,
    /// Scripted oracle answers.
    #[serde(default)]
    pub oracle_script: Option<OracleScript>,
    /// `always_negative` or `perfect`, for scripted questioners.
    #[serde(default)]
    pub builtin: Option<String>,
    /// results.jsonl to replay, for replay questioners.
    #[serde(default)]
    pub replay_results: Option<PathBuf>,
    /// Seconds to wait for a human answer.
    #[serde(default = "default_human_timeout")]
    pub human_timeout: f64,
}

impl AgentConfig {
    pub fn new(id: impl Into<String>, kind: AgentKind) -> Self {
        AgentConfig {
            id: id.into(),
            kind,
            endpoint: None,
            model_name: None,
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            timeout: default_timeout(),
            api_key_env: None,
            format: OutputFormat::Scored,
            template_version: default_template_version(),
            max_parse_retries: 1,
            max_transport_retries: 2,
            max_concurrency: default_concurrency(),
            requests_per_second: None,
            cache_unparsed: false,
            questioner_script: None,
            oracle_script: None,
            builtin: None,
            replay_results: None,
            human_timeout: default_human_timeout(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<AgentConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: AgentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing agent config {}", path.display()))?;
        if let (Some(p), Some(dir)) = (&cfg.replay_results, path.parent()) {
            if p.is_relative() {
                cfg.replay_results = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn problems(&self, role: Role) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |cond: bool, msg: &str| {
            if !cond {
                out.push(format!("agent `{}`: {msg}", self.id));
            }
        };
        need(!self.id.trim().is_empty(), "id is empty");
        need(self.temperature >= 0.0, "temperature must be >= 0");
        need(self.timeout > 0.0, "timeout must be positive");
        need(self.human_timeout > 0.0, "human_timeout must be positive");
        match self.kind {
            AgentKind::Remote => {
                need(self.endpoint.is_some(), "remote agents need an endpoint");
                need(self.model_name.is_some(), "remote agents need a model_name");
                need(TemplateSet::builtin(&self.template_version).is_ok(), "unknown template_version");
            }
            AgentKind::Scripted => match role {
                Role::Questioner => need(
                    self.questioner_script.is_some()
                        || matches!(self.builtin.as_deref(), Some("always_negative" | "perfect")),
                    "scripted questioners need questioner_script or builtin always_negative/perfect",
                ),
                Role::Oracle => need(self.oracle_script.is_some(), "scripted oracles need oracle_script"),
            },
            AgentKind::Replay => {
                need(role == Role::Questioner, "replay agents can only be questioners");
                need(self.replay_results.is_some(), "replay agents need replay_results");
            }
            AgentKind::Human => need(role == Role::Oracle, "human agents can only be oracles"),
        }
        out
    }

    fn api_key(&self) -> anyhow::Result<Option<String>> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) => Ok(Some(v)),
                Err(_) => bail!("agent `{}`: environment variable {var} is not set", self.id),
            },
        }
    }

    /// Upper bound on calls per questioner turn: parse re-prompts times transport retries.
    pub fn max_requests_per_call(&self) -> usize {
        match self.kind {
            AgentKind::Remote => ((self.max_parse_retries + 1) * (self.max_transport_retries + 1)) as usize,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Questioner,
    Oracle,
}

/// Shared resources for building agents of one run.
#[derive(Clone)]
pub struct AgentFactory {
    pub images: ImageStore,
    pub cache: Arc<Cache>,
    pub log: Option<Arc<RequestLog>>,
    pub gates: Arc<GateRegistry>,
    pub bridge: Option<SessionStore>,
    /// Specs, for the builtin perfect questioner.
    pub specs: Arc<Vec<EpisodeSpec>>,
    /// Live HTTP requests sent by every agent built here.
    pub requests: Arc<AtomicUsize>,
}

impl AgentFactory {
    pub fn new(images: ImageStore, cache: Arc<Cache>) -> Self {
        AgentFactory {
            images,
            cache,
            log: None,
            gates: Arc::default(),
            bridge: None,
            specs: Arc::default(),
            requests: Arc::default(),
        }
    }

    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    fn client(&self, cfg: &AgentConfig) -> anyhow::Result<ChatClient> {
        let endpoint = cfg.endpoint.clone().context("remote agent without endpoint")?;
        let gate = self.gates.gate(&endpoint, cfg.max_concurrency, cfg.requests_per_second);
        let settings = ChatSettings {
            endpoint,
            model: cfg.model_name.clone().context("remote agent without model_name")?,
            temperature: cfg.temperature,
            max_output_tokens: cfg.max_output_tokens,
            timeout: Duration::from_secs_f64(cfg.timeout),
            api_key: cfg.api_key()?,
            max_transport_retries: cfg.max_transport_retries,
        };
        ChatClient::new(settings, gate, self.log.clone(), self.requests.clone()).map_err(Into::into)
    }

    fn templates(cfg: &AgentConfig) -> anyhow::Result<Arc<TemplateSet>> {
        Ok(Arc::new(TemplateSet::builtin(&cfg.template_version)?))
    }

    pub fn questioner(&self, cfg: &AgentConfig) -> anyhow::Result<Box<dyn Questioner + Send>> {
        Ok(match cfg.kind {
            AgentKind::Remote => Box::new(RemoteQuestioner {
                id: cfg.id.clone(),
                client: self.client(cfg)?,
                cache: self.cache.clone(),
                images: self.images.clone(),
                templates: Self::templates(cfg)?,
                format: cfg.format,
                max_parse_retries: cfg.max_parse_retries,
                cache_unparsed: cfg.cache_unparsed,
            }),
            AgentKind::Scripted => match (cfg.builtin.as_deref(), &cfg.questioner_script) {
                (Some("always_negative"), _) => Box::new(ScriptedQuestioner::always_negative(cfg.id.clone())),
                (Some("perfect"), _) => Box::new(ReplayQuestioner::perfect(cfg.id.clone(), self.specs.iter())),
                (_, Some(script)) => Box::new(ScriptedQuestioner::new(cfg.id.clone(), cfg.format, script.clone())),
                _ => bail!("agent `{}`: no script", cfg.id),
            },
            AgentKind::Replay => {
                let path = cfg.replay_results.as_ref().context("replay agent without replay_results")?;
                let results: Vec<EpisodeResult> = read_jsonl(path)?;
                Box::new(ReplayQuestioner::from_results(cfg.id.clone(), cfg.format, &results))
            }
            AgentKind::Human => bail!("agent `{}`: human agents can only be oracles", cfg.id),
        })
    }

    pub fn oracle(&self, cfg: &AgentConfig) -> anyhow::Result<Box<dyn Oracle + Send>> {
        Ok(match cfg.kind {
            AgentKind::Remote => Box::new(RemoteOracle {
                id: cfg.id.clone(),
                client: self.client(cfg)?,
                cache: self.cache.clone(),
                images: self.images.clone(),
                templates: Self::templates(cfg)?,
            }),
            AgentKind::Scripted => Box::new(ScriptedOracle::new(
                cfg.id.clone(),
                cfg.oracle_script.clone().context("scripted oracle without oracle_script")?,
            )),
            AgentKind::Human => Box::new(HumanOracle::new(
                cfg.id.clone(),
                self.bridge.clone().context("human oracle needs the console bridge (serve-console)")?,
                self.images.clone(),
                Duration::from_secs_f64(cfg.human_timeout),
            )),
            AgentKind::Replay => bail!("agent `{}`: replay agents can only be questioners", cfg.id),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_checks() {
        let cfg: AgentConfig = serde_json::from_str(r#"{"id": "gpt", "kind": "remote"}"#).unwrap();
        assert_eq!(cfg.temperature, 0.0);
        assert_eq!(cfg.max_parse_retries, 1);
        let p = cfg.problems(Role::Questioner);
        assert!(p.iter().any(|m| m.contains("endpoint")));
        assert!(p.iter().any(|m| m.contains("model_name")));

        let mut neg = AgentConfig::new("x", AgentKind::Scripted);
        neg.builtin = Some("always_negative".into());
        neg.temperature = -0.5;
        assert_eq!(neg.problems(Role::Questioner), vec!["agent `x`: temperature must be >= 0"]);
        assert!(!AgentConfig::new("h", AgentKind::Human).problems(Role::Questioner).is_empty());
        assert!(AgentConfig::new("h", AgentKind::Human).problems(Role::Oracle).is_empty());
        assert!(serde_json::from_str::<AgentConfig>(r#"{"id": "a", "kind": "remote", "tempreature": 1}"#).is_err());
    }
}
