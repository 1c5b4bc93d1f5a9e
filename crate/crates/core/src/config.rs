//! Application configuration.
//!
//! Layers, lowest first: built-in defaults, a JSON config file, environment
//! variables, then command-line flags (applied by the caller).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::TemplateConfig;
use crate::episode::{EpisodeConfig, FeedbackTemplates};
use crate::mark::MarkStyle;
use crate::model::{GenerationParams, RemoteConfig, RetryPolicy};
use crate::prompts::Prompts;
use crate::protocol::ActionFormat;

pub const ENV_ENDPOINT: &str = "TARENV_ENDPOINT";
pub const ENV_API_KEY: &str = "TARENV_API_KEY";
pub const ENV_CONFIG: &str = "TARENV_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config {path} at `{field}`: {message}")]
    Invalid {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("no model backend configured: set backend.endpoint, {ENV_ENDPOINT} or --endpoint")]
    NoBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout_s: u64,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_key: None,
            model: "default".to_owned(),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            timeout_s: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub format: ActionFormat,
    pub prompts: Prompts,
    pub feedback: FeedbackTemplates,
    pub mark_style: MarkStyle,
    pub round2_image_first: bool,
    pub templates: TemplateConfig,
    pub backend: BackendSettings,
    pub generation: GenerationParams,
    pub parallelism: usize,
    pub seed: u64,
    pub session_ttl_s: u64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            format: ActionFormat::Explicit,
            prompts: Prompts::default(),
            feedback: FeedbackTemplates::default(),
            mark_style: MarkStyle::default(),
            round2_image_first: true,
            templates: TemplateConfig::default(),
            backend: BackendSettings::default(),
            generation: GenerationParams::default(),
            parallelism: 4,
            seed: 0,
            session_ttl_s: 600,
        }
    }
}

impl AppConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Invalid {
            path: path.to_path_buf(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json(&text, path)
    }

    /// Defaults, then the file (`path`, else `TARENV_CONFIG`), then the
    /// endpoint and key variables. `env` looks up a variable by name.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let from_env = env(ENV_CONFIG).filter(|s| !s.is_empty()).map(PathBuf::from);
        let mut config = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => Self::from_file(&p)?,
            None => Self::default(),
        };
        if let Some(endpoint) = env(ENV_ENDPOINT).filter(|s| !s.is_empty()) {
            config.backend.endpoint = Some(endpoint);
        }
        if let Some(key) = env(ENV_API_KEY).filter(|s| !s.is_empty()) {
            config.backend.api_key = Some(key);
        }
        Ok(config)
    }

    /// [`AppConfig::load`] against the process environment.
    pub fn load_from_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, |k| std::env::var(k).ok())
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            format: self.format,
            prompts: self.prompts.clone(),
            feedback: self.feedback.clone(),
            mark_style: self.mark_style,
            round2_image_first: self.round2_image_first,
        }
    }

    pub fn remote_config(&self) -> Result<RemoteConfig, ConfigError> {
        let b = &self.backend;
        let endpoint = b
            .endpoint
            .clone()
            .filter(|e| !e.trim().is_empty())
            .ok_or(ConfigError::NoBackend)?;
        Ok(RemoteConfig {
            endpoint,
            api_key: b.api_key.clone(),
            model: b.model.clone(),
            retry: b.retry,
            max_in_flight: b.max_in_flight,
            timeout_s: b.timeout_s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| ((*k).into(), (*v).into())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn precedence_defaults_file_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"format":"implicit","seed":7,"backend":{"endpoint":"http://file","model":"m"}}"#,
        )
        .unwrap();

        let c = AppConfig::load(None, env(&[])).unwrap();
        assert_eq!(c, AppConfig::default());
        assert_eq!(c.session_ttl_s, 600);

        let c = AppConfig::load(Some(&path), env(&[])).unwrap();
        assert_eq!(c.format, ActionFormat::Implicit);
        assert_eq!(c.seed, 7);
        assert_eq!(c.backend.endpoint.as_deref(), Some("http://file"));
        assert_eq!(c.parallelism, 4);

        let c = AppConfig::load(
            None,
            env(&[(ENV_CONFIG, path.to_str().unwrap()), (ENV_ENDPOINT, "http://env")]),
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.backend.endpoint.as_deref(), Some("http://env"));
        assert_eq!(c.remote_config().unwrap().model, "m");
    }

    #[test]
    fn field_level_errors() {
        let err = AppConfig::from_json(r#"{"backend":{"retry":{"attempts":"x"}}}"#, Path::new("c.json")).unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "backend.retry.attempts"),
            other => panic!("{other}"),
        }
        assert!(AppConfig::from_json(r#"{"colour":1}"#, Path::new("c.json")).is_err());
    }

    #[test]
    fn missing_backend() {
        assert!(matches!(
            AppConfig::default().remote_config(),
            Err(ConfigError::NoBackend)
        ));
    }
}
