//! Recognition backends: remote chat-style HTTP models, subprocess OCR
//! tools and commands, and an offline seeded mock.

mod cache;
mod command;
mod config;
mod http;
mod limit;
mod mock;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, CachePolicy, CachedBackend, ResponseCache};
pub use command::CommandBackend;
pub use config::{build_backend, build_backends, load_backend_configs, BackendConfig, BackendKind, MockConfig, RetryConfig};
pub use http::{Auth, HttpBackend, HttpSettings, DEFAULT_REQUEST_TEMPLATE, DEFAULT_RESPONSE_POINTER};
pub use limit::{Clock, Dispatcher, RateLimiter, RetryPolicy, Semaphore, SimClock, SystemClock};
pub use mock::{content_digest, MockBackend, SceneCar};

#[derive(Debug, Clone, PartialEq)]
pub struct VisionQuery {
    pub image: Arc<[u8]>,
    /// MIME type of `image`, e.g. `image/png`.
    pub mime: String,
    pub prompt: String,
    pub max_output_chars: usize,
    pub temperature: f64,
}

impl VisionQuery {
    pub fn new(image: impl Into<Arc<[u8]>>, mime: &str, prompt: &str) -> Self {
        Self {
            image: image.into(),
            mime: mime.to_string(),
            prompt: prompt.to_string(),
            max_output_chars: 256,
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.image.is_empty() {
            return Err(BackendError::new(ErrorKind::InvalidQuery, "image is empty"));
        }
        if self.prompt.trim().is_empty() {
            return Err(BackendError::new(ErrorKind::InvalidQuery, "prompt is empty"));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::new(ErrorKind::InvalidQuery, "temperature must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionReply {
    pub text: String,
    pub latency_ms: u64,
    pub backend_id: String,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Auth,
    Timeout,
    Malformed,
    RateLimited,
    Transient,
    Permanent,
    Process,
    InvalidQuery,
}

impl ErrorKind {
    pub fn retryable(self) -> bool {
        matches!(self, ErrorKind::Timeout | ErrorKind::RateLimited | ErrorKind::Transient)
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::Auth => "auth",
            ErrorKind::Timeout => "timeout",
            ErrorKind::Malformed => "malformed",
            ErrorKind::RateLimited => "rate_limited",
            ErrorKind::Transient => "transient",
            ErrorKind::Permanent => "permanent",
            ErrorKind::Process => "process",
            ErrorKind::InvalidQuery => "invalid_query",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind}: {message}")]
pub struct BackendError {
    pub kind: ErrorKind,
    pub message: String,
}

impl BackendError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Returns the model's reply text verbatim.
    fn query(&self, q: &VisionQuery) -> Result<VisionReply, BackendError>;

    /// Connectivity probe with a 1x1 image.
    fn check(&self) -> Result<VisionReply, BackendError> {
        self.query(&VisionQuery::new(probe_image(), "image/png", "Reply with OK."))
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn query(&self, q: &VisionQuery) -> Result<VisionReply, BackendError> {
        (**self).query(q)
    }

    fn check(&self) -> Result<VisionReply, BackendError> {
        (**self).check()
    }
}

/// Single black pixel as PNG.
pub fn probe_image() -> Vec<u8> {
    crate::forge::encode_png(&plate_core::forge::GrayImage::filled(1, 1, 0))
        .expect("1x1 PNG encodes")
}

pub fn mime_for_path(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    }
}
