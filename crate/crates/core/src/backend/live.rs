//! HTTP client for Ollama-compatible chat endpoints.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::BackendError;
use crate::prompting::AnalysisRequest;

pub const DEFAULT_ENDPOINT: &str = "http://localhost:11434/api/chat";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 2;
const BODY_EXCERPT_CHARS: usize = 200;

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub timeout: Duration,
    /// Extra attempts after a transport error, timeout, or 5xx status.
    pub max_retries: u32,
    pub bearer_token: Option<String>,
    pub max_in_flight: usize,
    pub retry_backoff: Duration,
}

impl LiveConfig {
    pub(super) fn validate(&self) -> Result<(), BackendError> {
        if self.endpoint_url.trim().is_empty() {
            return Err(BackendError::InvalidConfig("live backend requires an endpoint url".into()));
        }
        match reqwest::Url::parse(&self.endpoint_url) {
            Ok(url) if url.scheme() == "http" => {}
            Ok(url) => {
                return Err(BackendError::InvalidConfig(format!(
                    "unsupported endpoint scheme {:?}; only http is available",
                    url.scheme()
                )))
            }
            Err(e) => {
                return Err(BackendError::InvalidConfig(format!(
                    "invalid endpoint url {:?}: {e}",
                    self.endpoint_url
                )))
            }
        }
        if self.model_name.trim().is_empty() {
            return Err(BackendError::InvalidConfig("live backend requires a model name".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::InvalidConfig("in-flight cap must be positive".into()));
        }
        Ok(())
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(capacity: usize) -> Self {
        Self {
            free: Mutex::new(capacity),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.released.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.released.notify_one();
    }
}

pub(super) struct LiveClient {
    config: LiveConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
}

enum Attempt {
    Done(Result<String, BackendError>),
    Retry(BackendError),
}

impl LiveClient {
    pub(super) fn new(config: LiveConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::InvalidConfig(format!("cannot build http client: {e}")))?;
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            client,
        })
    }

    pub(super) fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn body(&self, request: &AnalysisRequest) -> Value {
        let model = if request.model_name.is_empty() {
            &self.config.model_name
        } else {
            &request.model_name
        };
        json!({
            "model": model,
            "stream": false,
            "options": {"temperature": request.temperature},
            "messages": [{
                "role": "user",
                "content": request.prompt_text,
                "images": request.images.iter().map(|b| STANDARD.encode(b)).collect::<Vec<_>>(),
            }],
        })
    }

    pub(super) fn send(&self, request: &AnalysisRequest) -> Result<String, BackendError> {
        let body = self.body(request);
        let case_id = request.case_id.clone();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let outcome = {
                let _permit = self.gate.acquire();
                self.attempt(&body, &case_id, attempts)
            };
            match outcome {
                Attempt::Done(result) => return result,
                Attempt::Retry(err) if attempts > self.config.max_retries => return Err(err),
                Attempt::Retry(err) => {
                    log::warn!("retrying after: {err}");
                    std::thread::sleep(self.config.retry_backoff);
                }
            }
        }
    }

    fn attempt(&self, body: &Value, case_id: &str, attempts: u32) -> Attempt {
        let mut builder = self.client.post(&self.config.endpoint_url).json(body);
        if let Some(token) = &self.config.bearer_token {
            builder = builder.bearer_auth(token);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(transport_error(e, case_id, attempts)),
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(transport_error(e, case_id, attempts)),
        };
        if !status.is_success() {
            let err = BackendError::HttpStatus {
                case_id: case_id.to_string(),
                status: status.as_u16(),
                body_excerpt: text.chars().take(BODY_EXCERPT_CHARS).collect(),
            };
            return if status.is_server_error() {
                Attempt::Retry(err)
            } else {
                Attempt::Done(Err(err))
            };
        }
        Attempt::Done(extract_content(&text).map_err(|message| BackendError::InvalidResponse {
            case_id: case_id.to_string(),
            message,
        }))
    }
}

fn transport_error(e: reqwest::Error, case_id: &str, attempts: u32) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout {
            case_id: case_id.to_string(),
            attempts,
        }
    } else {
        BackendError::Transport {
            case_id: case_id.to_string(),
            attempts,
            message: e.to_string(),
        }
    }
}

/// Pulls the assistant message text out of a chat response body.
pub(super) fn extract_content(body: &str) -> Result<String, String> {
    let value: Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    let content = value
        .pointer("/message/content")
        .or_else(|| value.pointer("/choices/0/message/content"))
        .and_then(Value::as_str)
        .ok_or("response has no message content")?;
    if content.is_empty() {
        return Err("model returned empty content".into());
    }
    Ok(content.to_string())
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;
    use crate::backend::{Backend, BackendConfig};

    /// Serves canned responses in order, repeating the last one, and records
    /// each request body.
    struct MockServer {
        url: String,
        hits: Arc<AtomicUsize>,
        bodies: Arc<Mutex<Vec<String>>>,
    }

    fn serve(responses: Vec<(u16, String)>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/api/chat", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                b.lock().unwrap().push(String::from_utf8(body).unwrap());
                let n = h.fetch_add(1, Ordering::SeqCst);
                let (status, text) = &responses[n.min(responses.len() - 1)];
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        MockServer { url, hits, bodies }
    }

    fn backend(url: &str, max_retries: u32) -> Backend {
        let BackendConfig::Live(mut live) = BackendConfig::live(url, "gemma3:4b") else {
            unreachable!()
        };
        live.max_retries = max_retries;
        live.retry_backoff = Duration::ZERO;
        live.timeout = Duration::from_secs(5);
        Backend::new(BackendConfig::Live(live)).unwrap()
    }

    fn request() -> AnalysisRequest {
        AnalysisRequest {
            case_id: "case-007".into(),
            prompt_text: "describe".into(),
            images: [vec![1], vec![2], vec![3]],
            model_name: "gemma3:4b".into(),
            temperature: 0.1,
            max_retries: 2,
            timeout: Duration::from_secs(5),
        }
    }

    #[test]
    fn server_error_exhausts_retries() {
        let server = serve(vec![(500, "boom".into())]);
        let err = backend(&server.url, 2).analyze(&request()).unwrap_err();
        assert!(matches!(err, BackendError::HttpStatus { status: 500, .. }), "{err}");
        assert_eq!(err.case_id(), Some("case-007"));
        assert_eq!(server.hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn success_is_not_retried() {
        let ok = r#"{"message":{"role":"assistant","content":"{\"categories\":[]}"},"done":true}"#;
        let server = serve(vec![(200, ok.into())]);
        let got = backend(&server.url, 2).analyze(&request()).unwrap();
        assert_eq!(got.text, "{\"categories\":[]}");
        assert_eq!(server.hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn recovers_after_transient_failure() {
        let ok = r#"{"message":{"content":"fine"}}"#;
        let server = serve(vec![(503, "busy".into()), (200, ok.into())]);
        assert_eq!(backend(&server.url, 2).analyze(&request()).unwrap().text, "fine");
        assert_eq!(server.hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let server = serve(vec![(404, "model not found".into())]);
        let err = backend(&server.url, 2).analyze(&request()).unwrap_err();
        assert!(matches!(err, BackendError::HttpStatus { status: 404, ref body_excerpt, .. } if body_excerpt == "model not found"));
        assert_eq!(server.hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn wire_format() {
        let server = serve(vec![(200, r#"{"message":{"content":"x"}}"#.into())]);
        backend(&server.url, 0).analyze(&request()).unwrap();
        let body: Value = serde_json::from_str(&server.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(body["model"], "gemma3:4b");
        assert_eq!(body["stream"], false);
        assert_eq!(body["options"]["temperature"], 0.1);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "describe");
        assert_eq!(body["messages"][0]["images"], json!(["AQ==", "Ag==", "Aw=="]));
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = backend(&format!("http://127.0.0.1:{port}/api/chat"), 1)
            .analyze(&request())
            .unwrap_err();
        assert!(matches!(err, BackendError::Transport { attempts: 2, .. }), "{err}");
    }

    #[test]
    fn content_extraction() {
        assert_eq!(extract_content(r#"{"message":{"content":"a"}}"#).unwrap(), "a");
        assert_eq!(
            extract_content(r#"{"choices":[{"message":{"content":"b"}}]}"#).unwrap(),
            "b"
        );
        assert!(extract_content(r#"{"message":{"content":""}}"#).is_err());
        assert!(extract_content("nope").is_err());
    }

    #[test]
    fn gate_bounds_concurrency() {
        let gate = Arc::new(Gate::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let (gate, active, peak) = (gate.clone(), active.clone(), peak.clone());
                s.spawn(move || {
                    let _permit = gate.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
