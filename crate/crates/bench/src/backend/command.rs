//! Subprocess backends: external OCR tools and local model commands.
//!
//! The image is written to a temporary file; `{image}` and `{prompt}` in
//! the argument list are replaced before spawning. No shell is involved.
//! The reply is the process's standard output.

use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::limit::{Dispatcher, SystemClock};
use super::{Backend, BackendError, ErrorKind, RetryPolicy, VisionQuery, VisionReply};

pub struct CommandBackend {
    id: String,
    argv: Vec<String>,
    timeout: Duration,
    dispatcher: Dispatcher,
}

impl CommandBackend {
    pub fn new(id: &str, argv: Vec<String>, timeout: Duration, retry: RetryPolicy, concurrency: usize) -> Result<Self, String> {
        if argv.is_empty() || argv[0].trim().is_empty() {
            return Err("command must name a program".into());
        }
        if !argv.iter().any(|a| a.contains("{image}")) {
            return Err("command must pass the image via {image}".into());
        }
        Ok(Self {
            id: id.to_string(),
            argv,
            timeout,
            dispatcher: Dispatcher::new(0, retry, concurrency, Arc::new(SystemClock::default())),
        })
    }

    fn run_once(&self, q: &VisionQuery) -> Result<String, BackendError> {
        let ext = match q.mime.as_str() {
            "image/jpeg" => ".jpg",
            "image/bmp" => ".bmp",
            "image/gif" => ".gif",
            "image/webp" => ".webp",
            _ => ".png",
        };
        let file = tempfile::Builder::new()
            .prefix("plate-bench-")
            .suffix(ext)
            .tempfile()
            .map_err(|e| BackendError::new(ErrorKind::Process, format!("temp image: {e}")))?;
        std::fs::write(file.path(), &q.image[..])
            .map_err(|e| BackendError::new(ErrorKind::Process, format!("temp image: {e}")))?;
        let image = file.path().to_string_lossy().into_owned();
        let args: Vec<String> = self
            .argv
            .iter()
            .map(|a| a.replace("{image}", &image).replace("{prompt}", &q.prompt))
            .collect();
        let mut child = Command::new(&args[0])
            .args(&args[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| BackendError::new(ErrorKind::Process, format!("spawning {}: {e}", args[0])))?;

        // drain both pipes off-thread so a chatty child cannot block
        let mut stdout = child.stdout.take().expect("piped");
        let mut stderr = child.stderr.take().expect("piped");
        let out = std::thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let err = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(BackendError::new(
                        ErrorKind::Timeout,
                        format!("{} exceeded {:?}", args[0], self.timeout),
                    ));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(BackendError::new(ErrorKind::Process, format!("waiting: {e}"))),
            }
        };
        let stdout = out
            .join()
            .expect("reader thread")
            .map_err(|e| BackendError::new(ErrorKind::Process, format!("reading stdout: {e}")))?;
        let stderr = err.join().expect("reader thread");
        if !status.success() {
            let stderr = String::from_utf8_lossy(&stderr);
            let tail = tail(&stderr, 300);
            return Err(BackendError::new(
                ErrorKind::Process,
                format!("{} exited with {status}: {}", args[0], tail.trim()),
            ));
        }
        String::from_utf8(stdout)
            .map_err(|_| BackendError::new(ErrorKind::Malformed, format!("{} wrote non-UTF-8 output", args[0])))
    }
}

fn tail(s: &str, max_chars: usize) -> &str {
    let skip = s.chars().count().saturating_sub(max_chars);
    s.char_indices().nth(skip).map_or("", |(i, _)| &s[i..])
}

impl Backend for CommandBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn query(&self, q: &VisionQuery) -> Result<VisionReply, BackendError> {
        q.validate()?;
        let start = Instant::now();
        let text = self.dispatcher.run(|| self.run_once(q))?;
        Ok(VisionReply {
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_id: self.id.clone(),
            cached: false,
        })
    }
}
