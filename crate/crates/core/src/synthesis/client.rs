//! Chat-completions client, retry policy and response parsing.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::PromptSpec;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ApiError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingKey(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ApiError> },
}

impl ApiError {
    /// Transport failures, rate limiting and server errors are retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            ApiError::Transport(_) => true,
            ApiError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Something that turns a prompt into generated items.
pub trait LlmClient: Send + Sync {
    /// Raw generated items, one per output, in response order.
    fn generate(&self, prompt: &PromptSpec) -> Result<Vec<Value>, ApiError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env_var: String,
    pub max_parallel_requests: usize,
    /// retries after the first attempt
    pub retry_limit: u32,
    pub timeout_ms: u64,
    /// first backoff delay; doubles per retry
    pub backoff_ms: u64,
    pub temperature: f64,
    pub offline_stub: bool,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            base_url: String::new(),
            model_name: String::new(),
            api_key_env_var: "EMBFORGE_API_KEY".to_string(),
            max_parallel_requests: 4,
            retry_limit: 3,
            timeout_ms: 60_000,
            backoff_ms: 500,
            temperature: 0.7,
            offline_stub: true,
        }
    }
}

/// Run `call` until it succeeds, fails with a non-retryable error, or has
/// been retried `retry_limit` times, sleeping `backoff * 2^k` before retry k.
pub fn with_retries<T>(
    retry_limit: u32,
    backoff: Duration,
    mut call: impl FnMut() -> Result<T, ApiError>,
) -> Result<T, ApiError> {
    let mut attempt = 0;
    loop {
        match call() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt < retry_limit => {
                thread::sleep(backoff * 2u32.saturating_pow(attempt));
                attempt += 1;
            }
            Err(e) if attempt == 0 && !e.is_retryable() => return Err(e),
            Err(e) => {
                return Err(ApiError::Exhausted {
                    attempts: attempt + 1,
                    last: Box::new(e),
                })
            }
        }
    }
}

/// Split a completion into items: a JSON array yields its elements,
/// otherwise every non-empty line is one item (parsed as JSON when it is an
/// object, kept as a string otherwise).
pub fn parse_items(content: &str) -> Vec<Value> {
    let trimmed = strip_code_fence(content.trim());
    if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(trimmed) {
        return items;
    }
    trimmed
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| match serde_json::from_str::<Value>(l) {
            Ok(v @ Value::Object(_)) => v,
            _ => Value::String(l.to_string()),
        })
        .collect()
}

fn strip_code_fence(s: &str) -> &str {
    let Some(rest) = s.strip_prefix("```") else {
        return s;
    };
    let body = rest.split_once('\n').map_or("", |(_, b)| b);
    body.strip_suffix("```").unwrap_or(body).trim()
}

/// Blocking chat-completions client.
pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    cfg: LlmClientConfig,
}

impl HttpClient {
    /// Reads the API key from `cfg.api_key_env_var`; a missing variable is
    /// only an error if the endpoint needs one (see [`HttpClient::require_key`]).
    pub fn new(cfg: LlmClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let base = cfg.base_url.trim_end_matches('/');
        let endpoint = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let api_key = std::env::var(&cfg.api_key_env_var).ok().filter(|k| !k.is_empty());
        HttpClient {
            agent,
            endpoint,
            api_key,
            cfg,
        }
    }

    pub fn require_key(self) -> Result<Self, ApiError> {
        if self.api_key.is_none() {
            return Err(ApiError::MissingKey(self.cfg.api_key_env_var.clone()));
        }
        Ok(self)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn request_body(&self, prompt: &PromptSpec) -> Value {
        json!({
            "model": self.cfg.model_name,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
            "temperature": self.cfg.temperature,
            "n": 1,
        })
    }

    fn attempt(&self, body: &Value) -> Result<Vec<Value>, ApiError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ApiError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ApiError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ApiError::Status { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ApiError::Malformed(e.to_string()))?;
        let choices = value
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| ApiError::Malformed("no choices array".into()))?;
        let mut items = Vec::new();
        for choice in choices {
            let content = choice
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| ApiError::Malformed("choice without message.content".into()))?;
            items.extend(parse_items(content));
        }
        Ok(items)
    }
}

impl LlmClient for HttpClient {
    fn generate(&self, prompt: &PromptSpec) -> Result<Vec<Value>, ApiError> {
        let body = self.request_body(prompt);
        with_retries(self.cfg.retry_limit, Duration::from_millis(self.cfg.backoff_ms), || {
            self.attempt(&body)
        })
    }
}

/// Map `f` over `inputs` with at most `max_parallel` worker threads. The
/// output is in input order regardless of scheduling.
pub fn parallel_map<I: Sync, O: Send>(inputs: &[I], max_parallel: usize, f: impl Fn(usize, &I) -> O + Sync) -> Vec<O> {
    let workers = max_parallel.max(1).min(inputs.len());
    if workers <= 1 {
        return inputs.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<O>> = (0..inputs.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= inputs.len() {
                    break;
                }
                let out = f(i, &inputs[i]);
                results.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots.into_iter().map(|o| o.expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn parses_arrays_and_lines() {
        assert_eq!(parse_items(r#"["a", "b"]"#), vec![json!("a"), json!("b")]);
        assert_eq!(
            parse_items("first\n\n second \n"),
            vec![json!("first"), json!("second")]
        );
        assert_eq!(
            parse_items("{\"query\": \"q\", \"pos\": \"p\"}\nplain"),
            vec![json!({"query": "q", "pos": "p"}), json!("plain")]
        );
        assert_eq!(parse_items("```json\n[\"x\"]\n```"), vec![json!("x")]);
    }

    #[test]
    fn retries_only_retryable_errors() {
        let calls = Cell::new(0);
        let r: Result<(), _> = with_retries(3, Duration::ZERO, || {
            calls.set(calls.get() + 1);
            Err(ApiError::Status {
                status: 503,
                body: String::new(),
            })
        });
        assert_eq!(calls.get(), 4);
        assert!(matches!(r, Err(ApiError::Exhausted { attempts: 4, .. })));

        calls.set(0);
        let r: Result<(), _> = with_retries(3, Duration::ZERO, || {
            calls.set(calls.get() + 1);
            Err(ApiError::Status {
                status: 400,
                body: String::new(),
            })
        });
        assert_eq!(calls.get(), 1);
        assert!(matches!(r, Err(ApiError::Status { status: 400, .. })));

        calls.set(0);
        let r = with_retries(3, Duration::ZERO, || {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(ApiError::Transport("reset".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));
    }

    #[test]
    fn parallel_map_keeps_input_order() {
        let xs: Vec<u64> = (0..50).collect();
        let out = parallel_map(&xs, 8, |i, &x| {
            thread::sleep(Duration::from_micros((50 - x) * 20));
            (i, x * x)
        });
        assert_eq!(out, xs.iter().map(|&x| (x as usize, x * x)).collect::<Vec<_>>());
    }
}
