//! Chat-completion transport, retrying query logic and a scripted local mock.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::answer::{parse_answer, ParsedAnswer};
use super::prompt::PromptInstance;
use super::LvlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub token_env: Option<String>,
    pub timeout_ms: u64,
    pub max_attempts: usize,
    pub backoff_ms: u64,
    pub concurrency: usize,
    pub max_images: usize,
    pub redact_prompts: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8089/v1".into(),
            model: "mock-lvlm".into(),
            token_env: None,
            timeout_ms: 30_000,
            max_attempts: 3,
            backoff_ms: 200,
            concurrency: 4,
            max_images: 4,
            redact_prompts: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    /// Connection failures and 5xx/429 replies; retried.
    Unavailable(String),
    /// Other non-success statuses; not retried.
    Rejected { status: u16, body: String },
    BadResponse(String),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Timeout => write!(f, "request timed out"),
            TransportError::Unavailable(m) => write!(f, "unavailable: {m}"),
            TransportError::Rejected { status, body } => write!(f, "rejected with {status}: {body}"),
            TransportError::BadResponse(m) => write!(f, "bad response: {m}"),
        }
    }
}

pub trait ChatTransport: Sync {
    /// Sends one request body and returns the assistant's reply text.
    fn send(&self, body: &Value, request_id: &str) -> Result<String, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &EndpointConfig) -> Result<Self, LvlmError> {
        let token = match &config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| LvlmError::MissingToken(var.clone()))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            token,
        })
    }
}

pub fn extract_reply(body: &str) -> Result<String, TransportError> {
    let v: Value = serde_json::from_str(body).map_err(|e| TransportError::BadResponse(e.to_string()))?;
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(TransportError::BadResponse("missing choices[0].message.content".into())),
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, body: &Value, request_id: &str) -> Result<String, TransportError> {
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .header("X-Request-Id", request_id);
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = match req.send(body.to_string()) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(TransportError::Timeout),
            Err(ureq::Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
                return Err(TransportError::Timeout)
            }
            Err(e) => return Err(TransportError::Unavailable(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(TransportError::Timeout),
            Err(e) => return Err(TransportError::Unavailable(e.to_string())),
        };
        match status {
            200..=299 => extract_reply(&text),
            429 | 500..=599 => Err(TransportError::Unavailable(format!("status {status}"))),
            _ => Err(TransportError::Rejected { status, body: text }),
        }
    }
}

fn mime_for(path: &str) -> &'static str {
    match Path::new(path).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("dcm") => "application/dicom",
        _ => "application/octet-stream",
    }
}

/// OpenAI-style request: one user message with a text part and one
/// `image_url` data-URI part per attached image.
pub fn build_request(instance: &PromptInstance, config: &EndpointConfig, image_root: &Path) -> Result<Value, LvlmError> {
    let mut content = vec![json!({"type": "text", "text": instance.text})];
    for rel in &instance.image_refs {
        let path = image_root.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| LvlmError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
        content.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:{};base64,{data}", mime_for(rel))}
        }));
    }
    Ok(json!({
        "model": config.model,
        "temperature": 0,
        "messages": [{"role": "user", "content": content}],
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnswer {
    pub stay_id: i64,
    pub raw: String,
    pub parsed: ParsedAnswer,
    pub attempts: usize,
    pub latency_ms: u64,
    pub model: String,
}

/// Sends with up to `max_attempts` tries and exponential backoff between
/// them. Rejections are not retried.
pub fn query_endpoint(
    instance: &PromptInstance,
    body: &Value,
    transport: &dyn ChatTransport,
    config: &EndpointConfig,
) -> Result<ModelAnswer, LvlmError> {
    let request_id = instance.request_id();
    let attempts_allowed = config.max_attempts.max(1);
    let started = Instant::now();
    let mut last = None;
    for attempt in 1..=attempts_allowed {
        match transport.send(body, &request_id) {
            Ok(raw) => {
                if attempt > 1 {
                    log::info!("{request_id}: succeeded after {attempt} attempts");
                }
                return Ok(ModelAnswer {
                    stay_id: instance.stay_id,
                    parsed: parse_answer(&raw),
                    raw,
                    attempts: attempt,
                    latency_ms: started.elapsed().as_millis() as u64,
                    model: config.model.clone(),
                });
            }
            Err(TransportError::Rejected { status, body }) => {
                return Err(LvlmError::Rejected { status, body });
            }
            Err(TransportError::BadResponse(m)) => return Err(LvlmError::BadResponse(m)),
            Err(e) => {
                log::warn!("{request_id}: attempt {attempt}/{attempts_allowed} failed: {e}");
                last = Some(e);
                if attempt < attempts_allowed {
                    std::thread::sleep(Duration::from_millis(config.backoff_ms << (attempt - 1)));
                }
            }
        }
    }
    match last {
        Some(TransportError::Timeout) if attempts_allowed == 1 => Err(LvlmError::Timeout {
            request_id,
            timeout_ms: config.timeout_ms,
        }),
        other => Err(LvlmError::EndpointUnavailable {
            request_id,
            attempts: attempts_allowed,
            last: other.map(|e| e.to_string()).unwrap_or_default(),
        }),
    }
}

/// Scripted answers for the mock endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    /// Keyed by `"<stay_id>:<task>"` or `"<stay_id>"`.
    pub replies: BTreeMap<String, String>,
    pub default_reply: Option<String>,
    /// Requests per request id answered with 503 before replying normally.
    pub fail_first: usize,
    /// Delay before every reply.
    pub delay_ms: u64,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, LvlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LvlmError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| LvlmError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn reply_for(&self, request_id: &str) -> String {
        let stay = request_id.split(':').next().unwrap_or("");
        self.replies
            .get(request_id)
            .or_else(|| self.replies.get(stay))
            .or(self.default_reply.as_ref())
            .cloned()
            .unwrap_or_else(|| "I am unable to answer that.".into())
    }
}

struct MockState {
    script: MockScript,
    seen: Mutex<HashMap<String, usize>>,
    requests: AtomicUsize,
    stop: AtomicBool,
}

/// Minimal HTTP/1.1 chat-completions server on 127.0.0.1.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(script: MockScript) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", script)
    }

    pub fn bind(addr: &str, script: MockScript) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(MockState {
            script,
            seen: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        });
        let st = Arc::clone(&state);
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if st.stop.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = conn {
                    let st = Arc::clone(&st);
                    std::thread::spawn(move || {
                        if let Err(e) = handle_connection(stream, &st) {
                            log::debug!("mock endpoint connection error: {e}");
                        }
                    });
                }
            }
        });
        Ok(Self {
            addr,
            state,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn request_count(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// Blocks serving requests until the process exits.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.state.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_connection(stream: TcpStream, st: &MockState) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    let mut request_id = String::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = v.trim().parse().unwrap_or(0),
                "x-request-id" => request_id = v.trim().to_string(),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    st.requests.fetch_add(1, Ordering::SeqCst);

    let mut out = stream;
    let count = {
        let mut seen = st.seen.lock().unwrap();
        let c = seen.entry(request_id.clone()).or_insert(0);
        *c += 1;
        *c
    };
    if st.script.delay_ms > 0 {
        std::thread::sleep(Duration::from_millis(st.script.delay_ms));
    }
    let (status, payload) = if !request_line.starts_with("POST") || !request_line.contains("/chat/completions") {
        ("404 Not Found", json!({"error": "not found"}))
    } else if count <= st.script.fail_first {
        ("503 Service Unavailable", json!({"error": "scripted failure"}))
    } else {
        let model = serde_json::from_slice::<Value>(&body)
            .ok()
            .and_then(|v| v["model"].as_str().map(String::from))
            .unwrap_or_default();
        (
            "200 OK",
            json!({
                "id": format!("mock-{request_id}-{count}"),
                "object": "chat.completion",
                "model": model,
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": st.script.reply_for(&request_id)},
                    "finish_reason": "stop"
                }]
            }),
        )
    };
    let text = payload.to_string();
    write!(
        out,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    )?;
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Task;

    fn instance(stay_id: i64) -> PromptInstance {
        PromptInstance {
            stay_id,
            task: Task::Mortality,
            text: "prompt".into(),
            image_refs: vec![],
            ground_truth: 1,
        }
    }

    fn config(url: String, timeout_ms: u64) -> EndpointConfig {
        EndpointConfig {
            base_url: url,
            timeout_ms,
            backoff_ms: 10,
            ..EndpointConfig::default()
        }
    }

    #[test]
    fn scripted_reply_round_trip() {
        let mut script = MockScript::default();
        script.replies.insert("5:mortality".into(), "Yes".into());
        let server = MockServer::start(script).unwrap();
        let cfg = config(server.base_url(), 5_000);
        let t = HttpTransport::new(&cfg).unwrap();
        let inst = instance(5);
        let body = build_request(&inst, &cfg, Path::new(".")).unwrap();
        let a = query_endpoint(&inst, &body, &t, &cfg).unwrap();
        assert_eq!(a.raw, "Yes");
        assert_eq!(a.parsed, ParsedAnswer::Yes);
        assert_eq!(a.attempts, 1);
    }

    #[test]
    fn dropped_first_request_is_retried() {
        let script = MockScript {
            default_reply: Some("No.".into()),
            fail_first: 1,
            ..MockScript::default()
        };
        let server = MockServer::start(script).unwrap();
        let cfg = config(server.base_url(), 5_000);
        let t = HttpTransport::new(&cfg).unwrap();
        let inst = instance(1);
        let body = build_request(&inst, &cfg, Path::new(".")).unwrap();
        let a = query_endpoint(&inst, &body, &t, &cfg).unwrap();
        assert_eq!(a.attempts, 2);
        assert_eq!(a.parsed, ParsedAnswer::No);
        assert_eq!(server.request_count(), 2);
    }

    #[test]
    fn persistent_timeouts_exhaust_attempts() {
        let script = MockScript {
            default_reply: Some("Yes".into()),
            delay_ms: 400,
            ..MockScript::default()
        };
        let server = MockServer::start(script).unwrap();
        let cfg = config(server.base_url(), 100);
        let t = HttpTransport::new(&cfg).unwrap();
        let inst = instance(2);
        let body = build_request(&inst, &cfg, Path::new(".")).unwrap();
        let err = query_endpoint(&inst, &body, &t, &cfg).unwrap_err();
        assert!(matches!(err, LvlmError::EndpointUnavailable { attempts: 3, .. }), "{err}");
        assert!(err.to_string().contains("timed out"));
    }

    #[test]
    fn single_attempt_timeout_is_distinct() {
        let script = MockScript {
            delay_ms: 400,
            ..MockScript::default()
        };
        let server = MockServer::start(script).unwrap();
        let mut cfg = config(server.base_url(), 100);
        cfg.max_attempts = 1;
        let t = HttpTransport::new(&cfg).unwrap();
        let inst = instance(3);
        let body = build_request(&inst, &cfg, Path::new(".")).unwrap();
        assert!(matches!(query_endpoint(&inst, &body, &t, &cfg), Err(LvlmError::Timeout { .. })));
    }

    #[test]
    fn images_become_data_uris() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"abc").unwrap();
        let mut inst = instance(1);
        inst.image_refs = vec!["a.png".into()];
        let body = build_request(&inst, &EndpointConfig::default(), dir.path()).unwrap();
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,YWJj");
    }
}
