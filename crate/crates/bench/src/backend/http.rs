//! Generic chat-style vision client. The request body is a JSON template
//! and the reply text is found by a JSON pointer, so vendor differences
//! live in config.

use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::Value;

use super::limit::{Dispatcher, SystemClock};
use super::{Backend, BackendError, ErrorKind, RetryPolicy, VisionQuery, VisionReply};

/// OpenAI-compatible chat completion with one text part and one image part.
pub const DEFAULT_REQUEST_TEMPLATE: &str = r#"{
  "model": "{{model}}",
  "temperature": {{temperature}},
  "max_tokens": {{max_tokens}},
  "messages": [{
    "role": "user",
    "content": [
      {"type": "text", "text": "{{prompt}}"},
      {"type": "image_url", "image_url": {"url": "data:{{mime}};base64,{{image_base64}}"}}
    ]
  }]
}"#;

pub const DEFAULT_RESPONSE_POINTER: &str = "/choices/0/message/content";

#[derive(Debug, Clone)]
pub struct Auth {
    /// Name of the environment variable holding the secret.
    pub env: String,
    pub header: String,
    pub scheme: String,
}

pub struct HttpBackend {
    id: String,
    endpoint: String,
    model: String,
    auth: Option<Auth>,
    template: String,
    pointer: String,
    client: reqwest::blocking::Client,
    dispatcher: Dispatcher,
}

pub struct HttpSettings {
    pub endpoint: String,
    pub model: String,
    pub auth: Option<Auth>,
    pub request_template: Option<String>,
    pub response_pointer: Option<String>,
    pub timeout: Duration,
    pub rate_limit_per_min: usize,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

fn json_escape(s: &str) -> String {
    let quoted = serde_json::to_string(s).expect("strings serialize");
    quoted[1..quoted.len() - 1].to_string()
}

fn render(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in pairs {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

impl HttpBackend {
    pub fn new(id: &str, s: HttpSettings) -> Result<Self, String> {
        let template = s.request_template.unwrap_or_else(|| DEFAULT_REQUEST_TEMPLATE.to_string());
        let pointer = s.response_pointer.unwrap_or_else(|| DEFAULT_RESPONSE_POINTER.to_string());
        if !template.contains("{{image_base64}}") || !template.contains("{{prompt}}") {
            return Err("request_template must contain {{prompt}} and {{image_base64}}".into());
        }
        let trial = Self::body(&template, "m", "p", "image/png", "AAAA", 0.0, 8);
        serde_json::from_str::<Value>(&trial)
            .map_err(|e| format!("request_template is not valid JSON after substitution: {e}"))?;
        if !pointer.is_empty() && !pointer.starts_with('/') {
            return Err("response_pointer must be a JSON pointer starting with '/'".into());
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(s.timeout)
            .build()
            .map_err(|e| format!("http client: {e}"))?;
        Ok(Self {
            id: id.to_string(),
            endpoint: s.endpoint,
            model: s.model,
            auth: s.auth,
            template,
            pointer,
            client,
            dispatcher: Dispatcher::new(
                s.rate_limit_per_min,
                s.retry,
                s.concurrency,
                Arc::new(SystemClock::default()),
            ),
        })
    }

    fn body(template: &str, model: &str, prompt: &str, mime: &str, b64: &str, temperature: f64, max_tokens: usize) -> String {
        render(
            template,
            &[
                ("model", &json_escape(model)),
                ("prompt", &json_escape(prompt)),
                ("mime", &json_escape(mime)),
                ("image_base64", b64),
                ("temperature", &format!("{temperature:?}")),
                ("max_tokens", &max_tokens.to_string()),
            ],
        )
    }

    fn secret(&self) -> Result<Option<(String, String)>, BackendError> {
        let Some(auth) = &self.auth else { return Ok(None) };
        let value = std::env::var(&auth.env).map_err(|_| {
            BackendError::new(ErrorKind::Auth, format!("environment variable {} is not set", auth.env))
        })?;
        Ok(Some((auth.header.clone(), format!("{}{}", auth.scheme, value))))
    }

    fn send_once(&self, body: &str, header: Option<&(String, String)>) -> Result<String, BackendError> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some((name, value)) = header {
            req = req.header(name.as_str(), value.as_str());
        }
        let resp = req.send().map_err(|e| {
            let kind = if e.is_timeout() { ErrorKind::Timeout } else { ErrorKind::Transient };
            BackendError::new(kind, format!("request failed: {}", e.without_url()))
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            let kind = if e.is_timeout() { ErrorKind::Timeout } else { ErrorKind::Transient };
            BackendError::new(kind, format!("reading response: {}", e.without_url()))
        })?;
        if !status.is_success() {
            let kind = match status.as_u16() {
                401 | 403 => ErrorKind::Auth,
                408 | 504 => ErrorKind::Timeout,
                429 => ErrorKind::RateLimited,
                500..=599 => ErrorKind::Transient,
                _ => ErrorKind::Permanent,
            };
            let snippet: String = text.chars().take(200).collect();
            return Err(BackendError::new(kind, format!("HTTP {status}: {snippet}")));
        }
        let json: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::new(ErrorKind::Malformed, format!("response is not JSON: {e}")))?;
        match json.pointer(&self.pointer) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(BackendError::new(
                ErrorKind::Malformed,
                format!("{} is {}, not a string", self.pointer, kind_name(other)),
            )),
            None => Err(BackendError::new(
                ErrorKind::Malformed,
                format!("response has no {}", self.pointer),
            )),
        }
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Replaces any occurrence of the secret in an error message.
fn redact(mut e: BackendError, secret: Option<&(String, String)>, raw: Option<&str>) -> BackendError {
    for s in [secret.map(|(_, v)| v.as_str()), raw].into_iter().flatten() {
        if !s.is_empty() {
            e.message = e.message.replace(s, "[redacted]");
        }
    }
    e
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn query(&self, q: &VisionQuery) -> Result<VisionReply, BackendError> {
        q.validate()?;
        let header = self.secret()?;
        let raw_secret = self.auth.as_ref().and_then(|a| std::env::var(&a.env).ok());
        let b64 = base64::engine::general_purpose::STANDARD.encode(&q.image[..]);
        let body = Self::body(&self.template, &self.model, &q.prompt, &q.mime, &b64, q.temperature, q.max_output_chars);
        let start = Instant::now();
        let text = self
            .dispatcher
            .run(|| self.send_once(&body, header.as_ref()))
            .map_err(|e| redact(e, header.as_ref(), raw_secret.as_deref()))?;
        Ok(VisionReply {
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_id: self.id.clone(),
            cached: false,
        })
    }
}
