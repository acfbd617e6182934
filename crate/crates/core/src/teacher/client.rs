use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::{build_prompt, PromptMode};
use super::{TeacherError, TeacherResponse};
use crate::corpus::Sentence;
use crate::io::write_atomic;

pub const API_KEY_ENV: &str = "TEACHER_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientError {
    /// Worth retrying: timeouts, rate limits, server errors.
    Transient(String),
    Permanent(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Transient(m) => write!(f, "transient: {m}"),
            ClientError::Permanent(m) => write!(f, "permanent: {m}"),
        }
    }
}

/// Anything that turns a prompt into a completion.
pub trait TeacherClient: Send + Sync {
    /// Part of the cache key, so different teachers never share entries.
    fn model_name(&self) -> String;
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

/// SHA-256 over prompt, mode and model name.
pub fn cache_key(prompt: &str, mode: PromptMode, model: &str) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(mode.as_str().as_bytes());
    h.update([0u8]);
    h.update(model.as_bytes());
    hex::encode(h.finalize())
}

/// Content-addressed response store, one file per key. Reads are lock-free;
/// writes go through a single mutex and land atomically.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, TeacherError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| TeacherError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fs::read_to_string(self.path(key)).ok()
    }

    pub fn put(&self, key: &str, raw: &str) -> Result<(), TeacherError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        write_atomic(&self.path(key), raw.as_bytes()).map_err(|e| TeacherError::Cache(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: usize,
    /// Delay before the first retry; doubles on each further retry.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AnnotateOptions {
    pub mode: PromptMode,
    pub max_parallel: usize,
    pub retry: RetryPolicy,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self {
            mode: PromptMode::FewShot5,
            max_parallel: 4,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub doc_id: String,
    pub sent_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct AnnotateOutcome {
    /// In input order; sentences that failed are absent.
    pub responses: Vec<TeacherResponse>,
    pub failures: Vec<AnnotationFailure>,
    /// Calls that reached the client, including failed attempts.
    pub client_calls: usize,
    pub cache_hits: usize,
}

fn complete_with_retry(
    client: &dyn TeacherClient,
    prompt: &str,
    retry: RetryPolicy,
    calls: &AtomicUsize,
) -> Result<String, ClientError> {
    let mut attempt = 0;
    loop {
        calls.fetch_add(1, Ordering::Relaxed);
        match client.complete(prompt) {
            Ok(raw) => return Ok(raw),
            Err(ClientError::Transient(_)) if attempt < retry.max_retries => {
                let delay = retry.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn annotate_one(
    sentence: &Sentence,
    client: &dyn TeacherClient,
    model: &str,
    cache: Option<&ResponseCache>,
    opts: &AnnotateOptions,
    calls: &AtomicUsize,
    hits: &AtomicUsize,
) -> Result<TeacherResponse, AnnotationFailure> {
    let key = sentence.key();
    let fail = |error: String| AnnotationFailure {
        doc_id: key.doc_id.clone(),
        sent_index: key.sent_index,
        error,
    };
    let prompt = build_prompt(&sentence.text, opts.mode).map_err(|e| fail(e.to_string()))?;
    let ck = cache_key(&prompt, opts.mode, model);
    if let Some(raw) = cache.and_then(|c| c.get(&ck)) {
        hits.fetch_add(1, Ordering::Relaxed);
        return Ok(TeacherResponse::from_raw(&key, raw));
    }
    let raw = complete_with_retry(client, &prompt, opts.retry, calls).map_err(|e| {
        let err = TeacherError::AllRetriesExhausted {
            key: key.clone(),
            last_error: e.to_string(),
        };
        fail(err.to_string())
    })?;
    if let Some(c) = cache {
        c.put(&ck, &raw).map_err(|e| fail(e.to_string()))?;
    }
    Ok(TeacherResponse::from_raw(&key, raw))
}

/// Queries the teacher for every sentence with at most `max_parallel`
/// requests in flight. Cached prompts are never re-sent. Failures are
/// collected rather than aborting the run.
pub fn annotate(
    sents: &[Sentence],
    client: &dyn TeacherClient,
    cache: Option<&ResponseCache>,
    opts: &AnnotateOptions,
) -> AnnotateOutcome {
    let model = client.model_name();
    let calls = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let workers = opts.max_parallel.clamp(1, sents.len().max(1));
    let mut results: Vec<Option<Result<TeacherResponse, AnnotationFailure>>> =
        (0..sents.len()).map(|_| None).collect();
    let slots = Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= sents.len() {
                    break;
                }
                let r = annotate_one(&sents[i], client, &model, cache, opts, &calls, &hits);
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    let mut outcome = AnnotateOutcome {
        client_calls: calls.into_inner(),
        cache_hits: hits.into_inner(),
        ..Default::default()
    };
    for r in results.into_iter().flatten() {
        match r {
            Ok(resp) => outcome.responses.push(resp),
            Err(f) => outcome.failures.push(f),
        }
    }
    outcome
}

/// Chat-completion client over JSON/HTTP.
#[derive(Debug, Clone)]
pub struct HttpClient {
    endpoint: String,
    model: String,
    api_key: String,
    timeout: Duration,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key.into(),
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads the key from `TEACHER_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self, TeacherError> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.trim().is_empty() => Ok(Self::new(endpoint, model, key)),
            _ => Err(TeacherError::MissingApiKey),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// The JSON body sent for `prompt`.
    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        serde_json::to_value(ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
        })
        .expect("serializable")
    }
}

impl TeacherClient for HttpClient {
    fn model_name(&self) -> String {
        self.model.clone()
    }

    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| ClientError::Permanent(e.to_string()))?;
        let resp = client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&self.request_body(prompt))
            .send()
            .map_err(|e| ClientError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ClientError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ClientError::Permanent(format!("HTTP {status}")));
        }
        let body: ChatResponse = resp
            .json()
            .map_err(|e| ClientError::Permanent(format!("bad response body: {e}")))?;
        body.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ClientError::Permanent("response has no choices".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    struct Flaky {
        failures_before_success: usize,
        calls: AtomicUsize,
    }

    impl TeacherClient for Flaky {
        fn model_name(&self) -> String {
            "flaky".into()
        }
        fn complete(&self, _prompt: &str) -> Result<String, ClientError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures_before_success {
                Err(ClientError::Transient("busy".into()))
            } else {
                Ok("None".into())
            }
        }
    }

    fn opts(max_retries: usize) -> AnnotateOptions {
        AnnotateOptions {
            mode: PromptMode::ZeroShot,
            max_parallel: 2,
            retry: RetryPolicy {
                max_retries,
                base_delay_ms: 0,
            },
        }
    }

    fn sents(n: usize) -> Vec<Sentence> {
        (0..n).map(|i| Sentence::new("d", i, format!("Sentence {i}."))).collect()
    }

    #[test]
    fn retries_then_succeeds() {
        let client = Flaky {
            failures_before_success: 2,
            calls: AtomicUsize::new(0),
        };
        let out = annotate(&sents(1), &client, None, &opts(3));
        assert_eq!(out.responses.len(), 1);
        assert!(out.failures.is_empty());
        assert_eq!(out.client_calls, 3);
    }

    #[test]
    fn exhausted_retries_recorded() {
        let client = Flaky {
            failures_before_success: usize::MAX,
            calls: AtomicUsize::new(0),
        };
        let out = annotate(&sents(1), &client, None, &opts(2));
        assert!(out.responses.is_empty());
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.client_calls, 3);
        assert!(out.failures[0].error.contains("retries exhausted"));
    }

    #[test]
    fn cache_prevents_repeat_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let client = Flaky {
            failures_before_success: 0,
            calls: AtomicUsize::new(0),
        };
        let first = annotate(&sents(3), &client, Some(&cache), &opts(0));
        assert_eq!(first.client_calls, 3);
        let second = annotate(&sents(3), &client, Some(&cache), &opts(0));
        assert_eq!(second.client_calls, 0);
        assert_eq!(second.cache_hits, 3);
        assert_eq!(first.responses, second.responses);
    }

    #[test]
    fn cache_key_depends_on_all_parts() {
        let a = cache_key("p", PromptMode::ZeroShot, "m");
        assert_ne!(a, cache_key("p", PromptMode::FewShot5, "m"));
        assert_ne!(a, cache_key("p", PromptMode::ZeroShot, "m2"));
        assert_ne!(a, cache_key("q", PromptMode::ZeroShot, "m"));
        assert_eq!(a.len(), 64);
    }

    fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf).to_string();
                if let Some(h) = text.find("\r\n\r\n") {
                    let len = text[..h]
                        .lines()
                        .find_map(|l| {
                            let l = l.to_ascii_lowercase();
                            l.strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap())
                        })
                        .unwrap_or(0);
                    if buf.len() >= h + 4 + len {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            let reply = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
            String::from_utf8_lossy(&buf).to_string()
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    #[test]
    fn http_client_wire_format() {
        let (url, handle) = serve_once(
            "200 OK",
            r#"{"choices":[{"message":{"role":"assistant","content":"clozapine: weight gain"}}]}"#,
        );
        let client = HttpClient::new(url, "gpt-test", "secret");
        let raw = client.complete("PROMPT TEXT").unwrap();
        assert_eq!(raw, "clozapine: weight gain");
        let request = handle.join().unwrap();
        assert!(request.starts_with("POST /v1/chat/completions"));
        assert!(request.to_ascii_lowercase().contains("authorization: bearer secret"));
        let body = &request[request.find("\r\n\r\n").unwrap() + 4..];
        let json: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(json["model"], "gpt-test");
        assert_eq!(json["messages"][0]["role"], "user");
        assert_eq!(json["messages"][0]["content"], "PROMPT TEXT");
    }

    #[test]
    fn http_status_classification() {
        let (url, h) = serve_once("503 Service Unavailable", "{}");
        let err = HttpClient::new(url, "m", "k").complete("p").unwrap_err();
        assert!(matches!(err, ClientError::Transient(_)));
        h.join().unwrap();
        let (url, h) = serve_once("401 Unauthorized", "{}");
        let err = HttpClient::new(url, "m", "k").complete("p").unwrap_err();
        assert!(matches!(err, ClientError::Permanent(_)));
        h.join().unwrap();
    }
}
