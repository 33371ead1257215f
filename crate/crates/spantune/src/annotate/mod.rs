//! Span-level hallucination annotation: prompt rendering, endpoint
//! abstraction with retry-and-repair, a deterministic mock endpoint, and a
//! generic chat-completion HTTP adapter.

mod prompt;

pub use prompt::{
    demo_user_message, final_user_message, DEMO1_RESPONSE, DEMO1_SOURCE, DEMO1_SUMMARY,
    DEMO2_RESPONSE, DEMO2_SOURCE, DEMO2_SUMMARY, RESPOND_INSTRUCTION, SYSTEM_PROMPT,
};

use crate::corpus::{parse_annotation_response, SpanAnnotation};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("annotation failed after {attempts} attempts; last error: {last_error}")]
    AnnotationFailed { attempts: u32, last_error: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no ground-truth entry for the given (source, summary) pair")]
    UnknownPair,
    #[error("endpoint configuration error: {0}")]
    Config(String),
}

/// One annotation job. Sampling settings are applied when the endpoint is
/// constructed; the fields here record the requested configuration.
#[derive(Debug, Clone)]
pub struct AnnotationRequest {
    pub source: String,
    pub summary: String,
    pub model_tag: String,
    pub temperature: f64,
    pub max_retries: u32,
}

impl AnnotationRequest {
    pub fn new(source: impl Into<String>, summary: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            summary: summary.into(),
            model_tag: "annotator".to_string(),
            temperature: 0.0,
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A chat-completion backend. Implementations hold no per-call state beyond
/// rate-limiter bookkeeping.
pub trait AnnotatorEndpoint: Send + Sync {
    fn complete(
        &self,
        system_prompt: &str,
        messages: &[ChatMessage],
    ) -> Result<String, AnnotateError>;
}

/// The rendered prompt: system text, the two demonstration (user, response)
/// pairs, and the final user message.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub system: String,
    pub demos: [(String, String); 2],
    pub user: String,
}

impl PromptBundle {
    /// Flattens the demonstrations and final user message into the chat
    /// transcript sent to the endpoint.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = Vec::with_capacity(5);
        for (user, response) in &self.demos {
            out.push(ChatMessage::user(user.clone()));
            out.push(ChatMessage::assistant(response.clone()));
        }
        out.push(ChatMessage::user(self.user.clone()));
        out
    }
}

pub fn render_annotation_prompt(source: &str, summary: &str) -> PromptBundle {
    PromptBundle {
        system: SYSTEM_PROMPT.to_string(),
        demos: [
            (
                demo_user_message(DEMO1_SOURCE, DEMO1_SUMMARY),
                DEMO1_RESPONSE.to_string(),
            ),
            (
                demo_user_message(DEMO2_SOURCE, DEMO2_SUMMARY),
                DEMO2_RESPONSE.to_string(),
            ),
        ],
        user: final_user_message(source, summary),
    }
}

/// Calls the endpoint and parses the completion. A parse or validation
/// failure appends the failed completion plus a repair instruction as extra
/// turns and retries; a transport failure retries the unchanged transcript.
/// At most `max_retries` retries follow the initial attempt.
pub fn annotate(
    request: &AnnotationRequest,
    endpoint: &dyn AnnotatorEndpoint,
) -> Result<SpanAnnotation, AnnotateError> {
    let bundle = render_annotation_prompt(&request.source, &request.summary);
    let mut messages = bundle.messages();
    let attempts = request.max_retries + 1;
    let mut last_error = String::new();
    let mut last_was_transport = false;
    for _ in 0..attempts {
        match endpoint.complete(&bundle.system, &messages) {
            Ok(completion) => match parse_annotation_response(&completion, &request.summary) {
                Ok(annotation) => return Ok(annotation),
                Err(err) => {
                    last_error = err.to_string();
                    last_was_transport = false;
                    messages.push(ChatMessage::assistant(completion));
                    messages.push(ChatMessage::user(repair_instruction(&last_error)));
                }
            },
            Err(AnnotateError::Transport(msg)) => {
                last_error = msg;
                last_was_transport = true;
            }
            Err(other) => return Err(other),
        }
    }
    if last_was_transport {
        Err(AnnotateError::Transport(last_error))
    } else {
        Err(AnnotateError::AnnotationFailed {
            attempts,
            last_error,
        })
    }
}

fn repair_instruction(error: &str) -> String {
    format!(
        "Your previous response could not be used: {error}. {RESPOND_INSTRUCTION}"
    )
}

/// Deterministic stand-in for a live annotator: answers from a ground-truth
/// table keyed by the exact (source, summary) pair.
pub struct MockAnnotator {
    table: HashMap<(String, String), Vec<String>>,
}

pub fn mock_annotator<I>(ground_truth: I) -> MockAnnotator
where
    I: IntoIterator<Item = ((String, String), Vec<String>)>,
{
    MockAnnotator {
        table: ground_truth.into_iter().collect(),
    }
}

impl MockAnnotator {
    /// Renders a well-formed response whose parsed spans equal `spans`.
    pub fn render_response(spans: &[String]) -> String {
        let reasoning = if spans.is_empty() {
            "Every statement in the summary is supported by the source."
        } else {
            "The summary contains statements that are not supported by the source."
        };
        let list = serde_json::to_string(spans).expect("string arrays always serialize");
        format!(
            "[[ ## reasoning ## ]]\n{reasoning}\n\n[[ ## hallucinated_spans ## ]]\n{list}\n\n[[ ## completed ## ]]"
        )
    }
}

impl AnnotatorEndpoint for MockAnnotator {
    fn complete(
        &self,
        _system_prompt: &str,
        messages: &[ChatMessage],
    ) -> Result<String, AnnotateError> {
        let last_user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| AnnotateError::Config("no user message in transcript".to_string()))?;
        let (source, summary) = extract_pair(&last_user.content)
            .ok_or_else(|| AnnotateError::Config("user message not in prompt format".to_string()))?;
        let spans = self
            .table
            .get(&(source, summary))
            .ok_or(AnnotateError::UnknownPair)?;
        Ok(Self::render_response(spans))
    }
}

fn extract_pair(user_message: &str) -> Option<(String, String)> {
    const SOURCE_HEAD: &str = "[[ ## source ## ]]\n";
    const SUMMARY_HEAD: &str = "\n\n[[ ## summary ## ]]\n";
    const TAIL: &str = "\n\nRespond with";
    let src_start = user_message.find(SOURCE_HEAD)? + SOURCE_HEAD.len();
    let sum_marker = user_message[src_start..].find(SUMMARY_HEAD)? + src_start;
    let source = user_message[src_start..sum_marker].to_string();
    let sum_start = sum_marker + SUMMARY_HEAD.len();
    let end = user_message[sum_start..].find(TAIL)? + sum_start;
    Some((source, user_message[sum_start..end].to_string()))
}

/// Paces calls to at most `requests_per_second`; a token bucket of capacity
/// one, which is what serializing a single API key requires.
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        let interval = if requests_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / requests_per_second)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            next_slot: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let at = (*next).max(now);
            *next = at + self.interval;
            at.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Endpoint settings read from the config file. The API key itself comes
/// from the environment variable named by `api_key_env`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub requests_per_second: Option<f64>,
    pub timeout_seconds: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model: "gpt-4o".to_string(),
            api_key_env: "SPANTUNE_API_KEY".to_string(),
            temperature: 0.0,
            requests_per_second: None,
            timeout_seconds: 60,
        }
    }
}

/// Generic chat-completion adapter: posts `{model, temperature, messages}`
/// and reads `choices[0].message.content`.
pub struct HttpChatEndpoint {
    config: EndpointConfig,
    api_key: String,
    limiter: Option<RateLimiter>,
    client: reqwest::blocking::Client,
}

impl HttpChatEndpoint {
    pub fn new(config: EndpointConfig) -> Result<Self, AnnotateError> {
        if config.base_url.is_empty() {
            return Err(AnnotateError::Config("endpoint base_url is empty".to_string()));
        }
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            AnnotateError::Config(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_seconds))
            .build()
            .map_err(|e| AnnotateError::Config(e.to_string()))?;
        let limiter = config.requests_per_second.map(RateLimiter::new);
        Ok(Self {
            config,
            api_key,
            limiter,
            client,
        })
    }

    pub fn request_body(&self, system_prompt: &str, messages: &[ChatMessage]) -> serde_json::Value {
        build_request_body(&self.config.model, self.config.temperature, system_prompt, messages)
    }
}

pub fn build_request_body(
    model: &str,
    temperature: f64,
    system_prompt: &str,
    messages: &[ChatMessage],
) -> serde_json::Value {
    let mut body_messages = vec![serde_json::json!({
        "role": "system",
        "content": system_prompt,
    })];
    for m in messages {
        let role = match m.role {
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        body_messages.push(serde_json::json!({"role": role, "content": m.content}));
    }
    serde_json::json!({
        "model": model,
        "temperature": temperature,
        "messages": body_messages,
    })
}

impl AnnotatorEndpoint for HttpChatEndpoint {
    fn complete(
        &self,
        system_prompt: &str,
        messages: &[ChatMessage],
    ) -> Result<String, AnnotateError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let body = self.request_body(system_prompt, messages);
        let response = self
            .client
            .post(&self.config.base_url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| AnnotateError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(AnnotateError::Transport(format!("HTTP {status}")));
        }
        let parsed: serde_json::Value = response
            .json()
            .map_err(|e| AnnotateError::Transport(e.to_string()))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                AnnotateError::Transport("response body missing choices[0].message.content".to_string())
            })
    }
}
