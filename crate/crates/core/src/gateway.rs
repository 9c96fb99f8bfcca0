//! Chat-completion gateway shared by every model-backed role.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::env::Speaker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Actor,
    Relevance,
    Ask,
    Parse,
    Teacher,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Actor, Role::Relevance, Role::Ask, Role::Parse, Role::Teacher];

    pub fn default_temperature(self) -> f32 {
        match self {
            Role::Actor => 0.6,
            _ => 0.2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Actor => "actor",
            Role::Relevance => "relevance",
            Role::Ask => "ask",
            Role::Parse => "parse",
            Role::Teacher => "teacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub speaker: Speaker,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { speaker: Speaker::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { speaker: Speaker::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { speaker: Speaker::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role: Role,
    pub messages: Vec<ChatMessage>,
    pub tools: Option<Vec<Value>>,
    pub temperature: f32,
}

impl ChatRequest {
    pub fn new(role: Role, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            role,
            messages,
            tools: None,
            temperature: role.default_temperature(),
        }
    }

    pub fn with_tools(mut self, tools: Vec<Value>) -> Self {
        self.tools = Some(tools);
        self
    }

    pub fn last_message(&self) -> &str {
        self.messages.last().map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChatOutput {
    Text { content: String },
    ToolCall { name: String, arguments: Value },
}

impl ChatOutput {
    pub fn text(&self) -> Option<&str> {
        match self {
            ChatOutput::Text { content } => Some(content),
            ChatOutput::ToolCall { .. } => None,
        }
    }

    fn token_text(&self) -> String {
        match self {
            ChatOutput::Text { content } => content.clone(),
            ChatOutput::ToolCall { name, arguments } => format!("{name} {arguments}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn add(&mut self, other: Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub output: ChatOutput,
    pub usage: Usage,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Retriable(String),
    #[error("protocol error: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Whitespace token count used by the mock backend.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockResponse {
    Text { content: String },
    ToolCall { name: String, arguments: Value },
    /// Answers a teacher request with the usual header line followed by
    /// the planner section of the prompt.
    EchoPlanner,
    /// Cycles through the listed responses, one per call.
    Sequence { items: Vec<MockResponse> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub role: Option<Role>,
    /// Substring the last message must contain.
    pub contains: Option<String>,
    pub response: MockResponse,
}

/// Scenario-table backend. Rules are tried in order; the first whose role
/// and matcher fit the request answers it.
#[derive(Default)]
pub struct MockBackend {
    rules: Vec<MockRule>,
    counters: Mutex<Vec<usize>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Self {
        let n = rules.len();
        MockBackend {
            rules,
            counters: Mutex::new(vec![0; n]),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Relevance says yes, ask and teacher echo, parse is left unmatched.
    pub fn offline_default() -> Self {
        MockBackend::new(vec![
            MockRule {
                role: Some(Role::Relevance),
                contains: None,
                response: MockResponse::Text { content: "yes".into() },
            },
            MockRule {
                role: Some(Role::Teacher),
                contains: None,
                response: MockResponse::EchoPlanner,
            },
        ])
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }

    fn resolve(&self, response: &MockResponse, rule: usize, req: &ChatRequest) -> Result<ChatOutput, BackendError> {
        match response {
            MockResponse::Text { content } => Ok(ChatOutput::Text { content: content.clone() }),
            MockResponse::ToolCall { name, arguments } => Ok(ChatOutput::ToolCall {
                name: name.clone(),
                arguments: arguments.clone(),
            }),
            MockResponse::EchoPlanner => echo_planner(req).map(|content| ChatOutput::Text { content }),
            MockResponse::Sequence { items } => {
                if items.is_empty() {
                    return Err(BackendError::Fatal("empty mock sequence".into()));
                }
                let i = {
                    let mut counters = self.counters.lock().unwrap();
                    let i = counters[rule] % items.len();
                    counters[rule] += 1;
                    i
                };
                self.resolve(&items[i], rule, req)
            }
        }
    }
}

fn echo_planner(req: &ChatRequest) -> Result<String, BackendError> {
    let system = req
        .messages
        .iter()
        .find(|m| m.speaker == Speaker::System)
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let target = system
        .lines()
        .find_map(|l| l.strip_prefix("Craft an item of type: "))
        .ok_or_else(|| BackendError::Fatal("no target in teacher context".into()))?;
    let planner = system
        .split_once("# Planner Output\n")
        .map(|(_, p)| p)
        .ok_or_else(|| BackendError::Fatal("no planner section in teacher prompt".into()))?;
    Ok(format!("To craft a {target}, follow these steps:\n{planner}"))
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        let last = request.last_message();
        let (idx, rule) = self
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| {
                r.role.is_none_or(|role| role == request.role)
                    && r.contains.as_ref().is_none_or(|c| last.contains(c.as_str()))
            })
            .ok_or_else(|| {
                BackendError::Fatal(format!("no mock rule for role {}", request.role.as_str()))
            })?;
        let output = self.resolve(&rule.response, idx, request)?;
        let prompt_tokens = request.messages.iter().map(|m| whitespace_tokens(&m.content)).sum();
        let usage = Usage {
            prompt_tokens,
            completion_tokens: whitespace_tokens(&output.token_text()),
        };
        Ok(ChatResponse { output, usage })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Ask the server for its reasoning channel and strip it from content.
    #[serde(default)]
    pub reasoning: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_timeout() -> u64 {
    120
}

/// Backend for servers speaking the common `/chat/completions` protocol.
pub struct HttpBackend {
    config: HttpConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn from_env(config: HttpConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            GatewayError::Config(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend { config, api_key, agent })
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| {
                let role = match m.speaker {
                    Speaker::System => "system",
                    Speaker::Assistant => "assistant",
                    // Tool results are replayed as user turns.
                    Speaker::User | Speaker::Tool => "user",
                };
                json!({"role": role, "content": m.content})
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
        });
        if let Some(tools) = &req.tools {
            body["tools"] = Value::Array(tools.clone());
        }
        if self.config.reasoning {
            body["reasoning"] = json!({"enabled": true});
        }
        body
    }
}

pub fn strip_reasoning(content: &str) -> String {
    let mut out = String::new();
    let mut rest = content;
    while let Some(start) = rest.find("<think>") {
        out.push_str(&rest[..start]);
        match rest[start..].find("</think>") {
            Some(end) => rest = &rest[start + end + "</think>".len()..],
            None => {
                rest = "";
                break;
            }
        }
    }
    out.push_str(rest);
    out.trim().to_string()
}

/// Extracts output and usage from a chat-completion response body.
pub fn parse_completion(body: &Value) -> Result<ChatResponse, BackendError> {
    let message = &body["choices"][0]["message"];
    if message.is_null() {
        return Err(BackendError::Fatal("response has no choices".into()));
    }
    let output = match message["tool_calls"].get(0) {
        Some(call) => {
            let name = call["function"]["name"]
                .as_str()
                .ok_or_else(|| BackendError::Fatal("tool call without name".into()))?
                .to_string();
            let raw = &call["function"]["arguments"];
            let arguments = match raw {
                Value::String(s) => serde_json::from_str(s).unwrap_or(Value::String(s.clone())),
                other => other.clone(),
            };
            ChatOutput::ToolCall { name, arguments }
        }
        None => ChatOutput::Text {
            content: strip_reasoning(message["content"].as_str().unwrap_or("")),
        },
    };
    let usage = Usage {
        prompt_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(ChatResponse { output, usage })
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(self.body(request))
            .map_err(|e| BackendError::Retriable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::Retriable(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {text}")));
        }
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        parse_completion(&body)
    }
}

/// Token usage per (episode, role).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UsageLedger {
    entries: BTreeMap<(usize, Role), Usage>,
    calls: u64,
}

impl UsageLedger {
    pub fn record(&mut self, episode: usize, role: Role, usage: Usage) {
        self.entries.entry((episode, role)).or_default().add(usage);
        self.calls += 1;
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn episode_total(&self, episode: usize) -> Usage {
        let mut total = Usage::default();
        for ((e, _), u) in &self.entries {
            if *e == episode {
                total.add(*u);
            }
        }
        total
    }

    pub fn episode_by_role(&self, episode: usize) -> BTreeMap<Role, Usage> {
        self.entries
            .iter()
            .filter(|((e, _), _)| *e == episode)
            .map(|((_, r), u)| (*r, *u))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub per_episode: BTreeMap<usize, u64>,
    pub per_role: BTreeMap<Role, Usage>,
    pub total: Usage,
    pub total_tokens: u64,
    pub total_thousands: f64,
}

pub fn ledger_report(ledger: &UsageLedger) -> LedgerReport {
    let mut per_episode = BTreeMap::new();
    let mut per_role: BTreeMap<Role, Usage> = Role::ALL.iter().map(|r| (*r, Usage::default())).collect();
    let mut total = Usage::default();
    for ((e, r), u) in &ledger.entries {
        *per_episode.entry(*e).or_insert(0) += u.total();
        per_role.get_mut(r).unwrap().add(*u);
        total.add(*u);
    }
    LedgerReport {
        per_episode,
        per_role,
        total,
        total_tokens: total.total(),
        total_thousands: total.total() as f64 / 1000.0,
    }
}

/// One gateway exchange, kept for the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub temperature: f32,
    pub usage: Usage,
    pub output: ChatOutput,
}

/// Retry, accounting and temperature policy around a backend.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub temperature_overrides: BTreeMap<Role, f32>,
    pub ledger: UsageLedger,
    pending: Vec<CallRecord>,
    episode: usize,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>) -> Self {
        Gateway {
            backend,
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            temperature_overrides: BTreeMap::new(),
            ledger: UsageLedger::default(),
            pending: Vec::new(),
            episode: 0,
        }
    }

    pub fn mock(backend: MockBackend) -> Self {
        let mut g = Gateway::new(Box::new(backend));
        g.base_delay = Duration::ZERO;
        g
    }

    pub fn set_episode(&mut self, episode: usize) {
        self.episode = episode;
    }

    /// Calls made since the last drain, for the trajectory log.
    pub fn drain_calls(&mut self) -> Vec<CallRecord> {
        std::mem::take(&mut self.pending)
    }

    pub fn complete(&mut self, mut request: ChatRequest) -> Result<ChatResponse, GatewayError> {
        if let Some(t) = self.temperature_overrides.get(&request.role) {
            request.temperature = *t;
        }
        let mut last_err = String::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.base_delay * 2u32.pow(attempt - 1));
            }
            match self.backend.complete(&request) {
                Ok(resp) => {
                    self.ledger.record(self.episode, request.role, resp.usage);
                    self.pending.push(CallRecord {
                        role: request.role,
                        temperature: request.temperature,
                        usage: resp.usage,
                        output: resp.output.clone(),
                    });
                    return Ok(resp);
                }
                Err(BackendError::Retriable(m)) => {
                    log::warn!("gateway attempt {} failed: {m}", attempt + 1);
                    last_err = m;
                }
                Err(BackendError::Fatal(m)) => return Err(GatewayError::Protocol(m)),
            }
        }
        Err(GatewayError::Transport {
            attempts: self.max_attempts,
            message: last_err,
        })
    }

    /// Text completion; tool-call outputs are a protocol error here.
    pub fn complete_text(&mut self, request: ChatRequest) -> Result<String, GatewayError> {
        match self.complete(request)?.output {
            ChatOutput::Text { content } => Ok(content),
            ChatOutput::ToolCall { name, .. } => {
                Err(GatewayError::Protocol(format!("expected text, got tool call {name}")))
            }
        }
    }
}
