//! Backend config file (TOML), one `[[backend]]` table per backend.
//!
//! ```toml
//! [[backend]]
//! id = "gpt-4o"
//! kind = "http_chat"
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! model = "gpt-4o"
//! auth_env = "OPENAI_API_KEY"
//! rate_limit_per_min = 60
//! retry = { max_attempts = 3, backoff_ms = 500 }
//!
//! [[backend]]
//! id = "tesseract"
//! kind = "external_ocr"
//! command = ["tesseract", "{image}", "stdout", "--psm", "7"]
//!
//! [[backend]]
//! id = "mock"
//! kind = "mock"
//! mock = { manifest = "data/manifest.jsonl", char_error_rate = 0.05, seed = 1 }
//! ```
//!
//! Credentials are named by environment variable only. Relative paths are
//! resolved against the config file's directory.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use plate_core::mock::{Confusion, ErrorKinds, ErrorModel};
use serde::{Deserialize, Serialize};

use super::cache::{CachePolicy, CachedBackend, ResponseCache};
use super::command::CommandBackend;
use super::http::{Auth, HttpBackend, HttpSettings};
use super::limit::RetryPolicy;
use super::mock::MockBackend;
use super::Backend;
use crate::manifest::load_manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    LocalCommand,
    ExternalOcr,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub char_error_rate: f64,
    #[serde(default)]
    pub error_kinds: ErrorKinds,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub confusion_bias: Vec<Confusion>,
    /// JSONL of `{"image": path, "prompt": text, "reply": text}`.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub id: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub command: Vec<String>,
    /// Environment variable holding the credential.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_scheme")]
    pub auth_scheme: String,
    #[serde(default)]
    pub rate_limit_per_min: usize,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub request_template: Option<String>,
    #[serde(default)]
    pub response_pointer: Option<String>,
    #[serde(default)]
    pub mock: Option<MockConfig>,
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_auth_scheme() -> String {
    "Bearer ".into()
}

fn default_timeout() -> u64 {
    60
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    backend: Vec<BackendConfig>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn valid_env_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with(|c: char| c.is_ascii_digit())
        && name.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        let id = &self.id;
        if !valid_id(id) {
            return Err(format!("backend id {id:?} must be non-empty and use only letters, digits, '-', '_', '.'"));
        }
        if let Some(env) = &self.auth_env {
            if !valid_env_name(env) {
                return Err(format!(
                    "backend {id}: auth_env must be an environment variable name like API_KEY, not a secret value"
                ));
            }
        }
        if self.retry.max_attempts == 0 {
            return Err(format!("backend {id}: retry.max_attempts must be >= 1"));
        }
        if self.concurrency == 0 || self.timeout_s == 0 {
            return Err(format!("backend {id}: concurrency and timeout_s must be >= 1"));
        }
        match self.kind {
            BackendKind::HttpChat => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(format!("backend {id}: http_chat needs an endpoint"));
                }
            }
            BackendKind::LocalCommand | BackendKind::ExternalOcr => {
                if self.command.is_empty() {
                    return Err(format!("backend {id}: {:?} needs a command", self.kind));
                }
            }
            BackendKind::Mock => {
                let m = self.mock.as_ref().ok_or_else(|| format!("backend {id}: mock needs a [mock] table"))?;
                ErrorModel {
                    char_error_rate: m.char_error_rate,
                    error_kinds: m.error_kinds,
                    seed: m.seed,
                    confusion_bias: m.confusion_bias.clone(),
                }
                .validate()
                .map_err(|e| format!("backend {id}: {e}"))?;
            }
        }
        Ok(())
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.retry.max_attempts,
            backoff: Duration::from_millis(self.retry.backoff_ms),
            ..RetryPolicy::default()
        }
    }
}

/// Loads and validates a config file; paths inside are made absolute.
pub fn load_backend_configs(path: &Path) -> Result<Vec<BackendConfig>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let file: ConfigFile = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(file.backend.len());
    for mut cfg in file.backend {
        cfg.validate().map_err(|e| format!("{}: {e}", path.display()))?;
        if !seen.insert(cfg.id.clone()) {
            return Err(format!("{}: duplicate backend id {:?}", path.display(), cfg.id));
        }
        if let Some(m) = cfg.mock.as_mut() {
            for p in [m.manifest.as_mut(), m.script.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        out.push(cfg);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ScriptLine {
    image: PathBuf,
    prompt: String,
    reply: String,
}

fn build_mock(cfg: &BackendConfig) -> Result<MockBackend, String> {
    let m = cfg.mock.as_ref().ok_or("mock table missing")?;
    let model = ErrorModel {
        char_error_rate: m.char_error_rate,
        error_kinds: m.error_kinds,
        seed: m.seed,
        confusion_bias: m.confusion_bias.clone(),
    };
    let mut mock = MockBackend::new(&cfg.id, model).map_err(|e| e.to_string())?;
    if let Some(path) = &m.manifest {
        let manifest = load_manifest(path).map_err(|e| e.to_string())?;
        mock = mock.with_manifest(&manifest, path).map_err(|e| e.to_string())?;
    }
    if let Some(path) = &m.script {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: ScriptLine =
                serde_json::from_str(&line).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
            let image_path = base.join(&s.image);
            let bytes = std::fs::read(&image_path).map_err(|e| format!("{}: {e}", image_path.display()))?;
            mock.register_reply(&bytes, &s.prompt, &s.reply);
        }
    }
    Ok(mock)
}

pub fn build_backend(cfg: &BackendConfig) -> Result<Arc<dyn Backend>, String> {
    cfg.validate()?;
    let timeout = Duration::from_secs(cfg.timeout_s);
    Ok(match cfg.kind {
        BackendKind::HttpChat => Arc::new(HttpBackend::new(
            &cfg.id,
            HttpSettings {
                endpoint: cfg.endpoint.clone().unwrap_or_default(),
                model: cfg.model.clone().unwrap_or_default(),
                auth: cfg.auth_env.as_ref().map(|env| Auth {
                    env: env.clone(),
                    header: cfg.auth_header.clone(),
                    scheme: cfg.auth_scheme.clone(),
                }),
                request_template: cfg.request_template.clone(),
                response_pointer: cfg.response_pointer.clone(),
                timeout,
                rate_limit_per_min: cfg.rate_limit_per_min,
                retry: cfg.retry_policy(),
                concurrency: cfg.concurrency,
            },
        )
        .map_err(|e| format!("backend {}: {e}", cfg.id))?),
        BackendKind::LocalCommand | BackendKind::ExternalOcr => Arc::new(
            CommandBackend::new(&cfg.id, cfg.command.clone(), timeout, cfg.retry_policy(), cfg.concurrency)
                .map_err(|e| format!("backend {}: {e}", cfg.id))?,
        ),
        BackendKind::Mock => Arc::new(build_mock(cfg).map_err(|e| format!("backend {}: {e}", cfg.id))?),
    })
}

/// Builds every configured backend, wrapped in the reply cache unless disabled.
pub fn build_backends(
    configs: &[BackendConfig],
    cache: Option<Arc<ResponseCache>>,
    policy: CachePolicy,
) -> Result<BTreeMap<String, Arc<dyn Backend>>, String> {
    let mut out = BTreeMap::new();
    for cfg in configs {
        let mut b = build_backend(cfg)?;
        if let (Some(cache), false) = (&cache, policy == CachePolicy::Off) {
            b = Arc::new(CachedBackend::new(b, cache.clone(), policy));
        }
        out.insert(cfg.id.clone(), b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<BackendConfig>, String> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backends.toml");
        std::fs::write(&path, text).unwrap();
        load_backend_configs(&path)
    }

    #[test]
    fn parses_all_kinds() {
        let cfgs = parse(
            r#"
[[backend]]
id = "gpt-4o"
kind = "http_chat"
endpoint = "https://example.invalid/v1/chat"
model = "gpt-4o"
auth_env = "OPENAI_API_KEY"
rate_limit_per_min = 60
retry = { max_attempts = 4, backoff_ms = 250 }

[[backend]]
id = "tesseract"
kind = "external_ocr"
command = ["tesseract", "{image}", "stdout"]

[[backend]]
id = "mock"
kind = "mock"
mock = { char_error_rate = 0.05, seed = 1, confusion_bias = [{ from = "P", to = "R", prob = 0.5 }] }
"#,
        )
        .unwrap();
        assert_eq!(cfgs.len(), 3);
        assert_eq!(cfgs[0].retry.max_attempts, 4);
        assert_eq!(cfgs[0].auth_header, "Authorization");
        assert_eq!(cfgs[2].mock.as_ref().unwrap().confusion_bias[0].to.as_char(), 'R');
        let built = build_backends(&cfgs, None, CachePolicy::Off).unwrap();
        assert_eq!(built.keys().collect::<Vec<_>>(), ["gpt-4o", "mock", "tesseract"]);
    }

    #[test]
    fn rejects_inline_secrets_and_duplicates() {
        let err = parse("[[backend]]\nid='a'\nkind='http_chat'\nendpoint='http://x'\napi_key='sk-123'\n").unwrap_err();
        assert!(err.contains("api_key"), "{err}");
        let err = parse("[[backend]]\nid='a'\nkind='http_chat'\nendpoint='http://x'\nauth_env='sk-live-123abc'\n").unwrap_err();
        assert!(err.contains("environment variable name"), "{err}");
        let err = parse("[[backend]]\nid='a'\nkind='mock'\nmock={}\n[[backend]]\nid='a'\nkind='mock'\nmock={}\n").unwrap_err();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn rejects_bad_ids_and_missing_fields() {
        assert!(parse("[[backend]]\nid='../x'\nkind='mock'\nmock={}\n").is_err());
        assert!(parse("[[backend]]\nid='a'\nkind='http_chat'\n").is_err());
        assert!(parse("[[backend]]\nid='a'\nkind='local_command'\n").is_err());
        assert!(parse("[[backend]]\nid='a'\nkind='mock'\n").is_err());
        assert!(parse("[[backend]]\nid='a'\nkind='mock'\nmock={char_error_rate=2.0}\n").is_err());
    }
}
