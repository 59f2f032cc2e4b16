//! Application configuration: a TOML file with full defaults, overridable
//! field by field from CLI flags. The resolved configuration's digest is
//! embedded in every run's metadata so runs are self-describing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DecisionScore, GroupId, Thresholds};
use crate::eval::harness::{BackendSpec, EvalEnv, ProviderSpec, WikiSpec};
use crate::eval::DatasetMapping;
use crate::gateway::GatewayLimits;
use crate::pipeline::{FusionStrategy, GateRule, PipelineConfig};
use crate::prompts::TemplateSet;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("cannot parse config file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub base_url: String,
    pub model_id: String,
    pub timeout_s: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".to_string(),
            model_id: "gemini-2.5-flash".to_string(),
            timeout_s: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    /// "deterministic" or "http".
    pub provider: String,
    pub base_url: String,
    pub model: String,
    pub dim: usize,
    pub timeout_s: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: "deterministic".to_string(),
            base_url: "http://localhost:8000/v1".to_string(),
            model: "text-embedding-3-small".to_string(),
            dim: 1536,
            timeout_s: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WikiSection {
    pub api_url: String,
    pub timeout_s: u64,
    /// Offline mirror of encyclopedia responses; used when set.
    pub fixture_dir: Option<PathBuf>,
}

impl Default for WikiSection {
    fn default() -> Self {
        Self {
            api_url: "https://en.wikipedia.org/w/api.php".to_string(),
            timeout_s: 30,
            fixture_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSection {
    pub path: Option<PathBuf>,
    /// "replay", "record", or "hybrid".
    pub mode: String,
}

impl Default for FixtureSection {
    fn default() -> Self {
        Self {
            path: None,
            mode: "replay".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub tau_low: f64,
    pub tau_high: f64,
    pub k_d: usize,
    /// "adjudicate" or "average".
    pub fusion: String,
    pub cut: f64,
    /// "interval_or_flag" or "interval_only".
    pub gate: String,
    pub top_m_passages: usize,
    pub parallelism: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            tau_low: 0.4,
            tau_high: 0.6,
            k_d: 5,
            fusion: "adjudicate".to_string(),
            cut: 0.5,
            gate: "interval_or_flag".to_string(),
            top_m_passages: 8,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sample_n: usize,
    pub seed: u64,
    pub shots: usize,
    pub groups: Vec<String>,
    #[serde(flatten)]
    pub mapping: DatasetMapping,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sample_n: 100,
            seed: 42,
            shots: 6,
            groups: GroupId::BUILTIN
                .iter()
                .map(|g| g.canonical().to_string())
                .collect(),
            mapping: DatasetMapping::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    pub rate_interval_ms: u64,
    pub max_inflight: usize,
    pub temperature_classify: f64,
    pub temperature_query_gen: f64,
}

impl Default for LimitsSection {
    fn default() -> Self {
        let limits = GatewayLimits::default();
        Self {
            retry_attempts: limits.retry_attempts,
            retry_base_ms: limits.retry_base_ms,
            rate_interval_ms: limits.rate_interval_ms,
            max_inflight: limits.max_inflight,
            temperature_classify: 0.0,
            temperature_query_gen: 0.7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub backend: BackendSection,
    pub embedding: EmbeddingSection,
    pub wiki: WikiSection,
    pub fixtures: FixtureSection,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
    pub limits: LimitsSection,
    pub cache_dir: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Digest of the resolved configuration, for run metadata.
    pub fn digest(&self) -> String {
        crate::gateway::sha256_hex(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        match &self.template_dir {
            Some(dir) => TemplateSet::from_dir(dir)
                .map_err(|e| ConfigError::Invalid(format!("template override: {e}"))),
            None => Ok(TemplateSet::default()),
        }
    }

    pub fn gateway_limits(&self) -> GatewayLimits {
        GatewayLimits {
            retry_attempts: self.limits.retry_attempts,
            retry_base_ms: self.limits.retry_base_ms,
            rate_interval_ms: self.limits.rate_interval_ms,
            max_inflight: self.limits.max_inflight,
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        let thresholds = Thresholds::new(self.pipeline.tau_low, self.pipeline.tau_high)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let cut =
            DecisionScore::new(self.pipeline.cut).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let fusion = match self.pipeline.fusion.as_str() {
            "adjudicate" => FusionStrategy::Adjudicate,
            "average" => FusionStrategy::Average,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown fusion strategy {other:?} (expected adjudicate or average)"
                )))
            }
        };
        let gate = match self.pipeline.gate.as_str() {
            "interval_or_flag" => GateRule::IntervalOrFlag,
            "interval_only" => GateRule::IntervalOnly,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown gate rule {other:?} (expected interval_or_flag or interval_only)"
                )))
            }
        };
        if self.pipeline.k_d == 0 {
            return Err(ConfigError::Invalid("k_d must be at least 1".into()));
        }
        Ok(PipelineConfig {
            thresholds,
            k_d: self.pipeline.k_d,
            fusion,
            ablation_no_consult: false,
            cut,
            gate,
            top_m_passages: self.pipeline.top_m_passages,
            parallelism: self.pipeline.parallelism,
        })
    }

    pub fn groups(&self) -> Vec<GroupId> {
        self.eval.groups.iter().map(|g| GroupId::parse(g)).collect()
    }

    fn backend_spec(&self, offline: bool) -> Result<BackendSpec, ConfigError> {
        let fixtures = self.fixtures.path.clone();
        if offline {
            let fixtures = fixtures.ok_or_else(|| {
                ConfigError::Invalid("offline mode requires a fixture path".into())
            })?;
            return Ok(BackendSpec::Replay { fixtures });
        }
        match self.fixtures.mode.as_str() {
            "replay" => match fixtures {
                Some(fixtures) => Ok(BackendSpec::Replay { fixtures }),
                None => Ok(BackendSpec::Live {
                    base_url: self.backend.base_url.clone(),
                    timeout_s: self.backend.timeout_s,
                }),
            },
            "record" => {
                let fixtures = fixtures.ok_or_else(|| {
                    ConfigError::Invalid("record mode requires a fixture path".into())
                })?;
                Ok(BackendSpec::RecordLive {
                    base_url: self.backend.base_url.clone(),
                    timeout_s: self.backend.timeout_s,
                    fixtures,
                })
            }
            "hybrid" => {
                let fixtures = fixtures.ok_or_else(|| {
                    ConfigError::Invalid("hybrid mode requires a fixture path".into())
                })?;
                Ok(BackendSpec::Hybrid {
                    base_url: self.backend.base_url.clone(),
                    timeout_s: self.backend.timeout_s,
                    fixtures,
                })
            }
            other => Err(ConfigError::Invalid(format!(
                "unknown fixture mode {other:?} (expected replay, record, or hybrid)"
            ))),
        }
    }

    fn wiki_spec(&self, offline: bool) -> Result<WikiSpec, ConfigError> {
        match (&self.wiki.fixture_dir, offline) {
            (Some(dir), _) => Ok(WikiSpec::FixtureDir(dir.clone())),
            (None, true) => Err(ConfigError::Invalid(
                "offline mode requires a wiki fixture directory".into(),
            )),
            (None, false) => Ok(WikiSpec::Http {
                api_url: self.wiki.api_url.clone(),
                timeout_s: self.wiki.timeout_s,
            }),
        }
    }

    fn provider_spec(&self, offline: bool) -> Result<ProviderSpec, ConfigError> {
        match self.embedding.provider.as_str() {
            "deterministic" => Ok(ProviderSpec::Deterministic),
            "http" if offline => Err(ConfigError::Invalid(
                "offline mode cannot use the http embedding provider".into(),
            )),
            "http" => Ok(ProviderSpec::Http {
                base_url: self.embedding.base_url.clone(),
                model: self.embedding.model.clone(),
                dim: self.embedding.dim,
                timeout_s: self.embedding.timeout_s,
            }),
            other => Err(ConfigError::Invalid(format!(
                "unknown embedding provider {other:?} (expected deterministic or http)"
            ))),
        }
    }

    /// Assembles the full evaluation environment. `offline` forces replay
    /// fixtures, the wiki fixture directory, and the deterministic
    /// embedding provider, guaranteeing that no network socket is opened.
    pub fn eval_env(&self, offline: bool) -> Result<EvalEnv, ConfigError> {
        let cache_epoch = self
            .cache_dir
            .as_deref()
            .map(crate::knowledge::read_epoch)
            .unwrap_or(0);
        Ok(EvalEnv {
            backend: self.backend_spec(offline)?,
            wiki: self.wiki_spec(offline)?,
            provider: self.provider_spec(offline)?,
            templates: self.templates()?,
            model_id: self.backend.model_id.clone(),
            limits: self.gateway_limits(),
            cache_dir: self.cache_dir.clone(),
            cache_epoch,
            temperature: self.limits.temperature_classify,
            query_temperature: self.limits.temperature_query_gen,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let config = AppConfig::default();
        assert!(config.pipeline_config().is_ok());
        assert_eq!(config.groups().len(), 6);
        assert_eq!(config.digest().len(), 64);
    }

    #[test]
    fn load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(
            &path,
            "[pipeline]\ntau_low = 0.3\ntau_high = 0.7\n\n[eval]\nseed = 7\n",
        )
        .unwrap();
        let config = AppConfig::load(&path).unwrap();
        assert_eq!(config.pipeline.tau_low, 0.3);
        assert_eq!(config.eval.seed, 7);
        // Everything else keeps its default.
        assert_eq!(config.pipeline.k_d, 5);
    }

    #[test]
    fn invalid_band_is_rejected() {
        let config = AppConfig {
            pipeline: PipelineSection {
                tau_low: 0.8,
                tau_high: 0.2,
                ..PipelineSection::default()
            },
            ..AppConfig::default()
        };
        assert!(config.pipeline_config().is_err());
    }

    #[test]
    fn offline_requires_fixtures() {
        let config = AppConfig::default();
        assert!(config.eval_env(true).is_err());

        let ready = AppConfig {
            fixtures: FixtureSection {
                path: Some(PathBuf::from("/tmp/f.jsonl")),
                mode: "replay".to_string(),
            },
            wiki: WikiSection {
                fixture_dir: Some(PathBuf::from("/tmp/wiki")),
                ..WikiSection::default()
            },
            ..AppConfig::default()
        };
        let env = ready.eval_env(true).unwrap();
        assert!(matches!(env.backend, BackendSpec::Replay { .. }));
        assert!(matches!(env.wiki, WikiSpec::FixtureDir(_)));
        assert!(matches!(env.provider, ProviderSpec::Deterministic));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "[pipeline]\ntypo_key = 1\n").unwrap();
        assert!(AppConfig::load(&path).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = AppConfig::default();
        let mut b = AppConfig::default();
        assert_eq!(a.digest(), b.digest());
        b.eval.seed = 43;
        assert_ne!(a.digest(), b.digest());
    }
}
