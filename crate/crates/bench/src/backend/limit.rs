//! Rate limiting, retry with backoff and an in-flight bound for remote calls.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::BackendError;

const WINDOW: Duration = Duration::from_secs(60);

pub trait Clock: Send + Sync {
    /// Time since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Manual clock for tests: `sleep` advances time instantly.
#[derive(Debug, Default)]
pub struct SimClock {
    now: Mutex<Duration>,
}

impl SimClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }
}

impl Clock for SimClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

/// Sliding-window limiter: at most `per_min` dispatches in any 60 s window.
pub struct RateLimiter {
    per_min: usize,
    sent: Mutex<VecDeque<Duration>>,
    clock: Arc<dyn Clock>,
}

impl RateLimiter {
    /// `per_min == 0` disables limiting.
    pub fn new(per_min: usize, clock: Arc<dyn Clock>) -> Self {
        Self {
            per_min,
            sent: Mutex::new(VecDeque::new()),
            clock,
        }
    }

    /// Blocks until a dispatch is allowed and records it; returns the dispatch time.
    pub fn acquire(&self) -> Duration {
        loop {
            let now = self.clock.now();
            let wait = {
                let mut sent = self.sent.lock().unwrap();
                while sent.front().is_some_and(|&t| t + WINDOW <= now) {
                    sent.pop_front();
                }
                if self.per_min == 0 || sent.len() < self.per_min {
                    if self.per_min > 0 {
                        sent.push_back(now);
                    }
                    return now;
                }
                sent[0] + WINDOW - now
            };
            self.clock.sleep(wait);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
        }
    }
}

#[derive(Debug)]
pub struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Applies the in-flight bound, rate limit and retry policy around one call.
pub struct Dispatcher {
    limiter: RateLimiter,
    retry: RetryPolicy,
    inflight: Semaphore,
    clock: Arc<dyn Clock>,
}

impl Dispatcher {
    pub fn new(rate_limit_per_min: usize, retry: RetryPolicy, concurrency: usize, clock: Arc<dyn Clock>) -> Self {
        Self {
            limiter: RateLimiter::new(rate_limit_per_min, clock.clone()),
            retry,
            inflight: Semaphore::new(concurrency),
            clock,
        }
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let _permit = self.inflight.acquire();
        let attempts = self.retry.max_attempts.max(1);
        let mut delay = self.retry.backoff;
        for attempt in 1.. {
            self.limiter.acquire();
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.kind.retryable() && attempt < attempts => {
                    log::warn!("attempt {attempt}/{attempts} failed ({e}); retrying in {delay:?}");
                    self.clock.sleep(delay);
                    delay = (delay * 2).min(self.retry.max_backoff);
                }
                Err(mut e) => {
                    if e.kind.retryable() {
                        e.message = format!("{} (gave up after {attempt} attempts)", e.message);
                    }
                    return Err(e);
                }
            }
        }
        unreachable!("retry loop returns")
    }
}
