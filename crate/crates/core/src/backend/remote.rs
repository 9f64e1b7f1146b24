//! Chat-completion HTTP clients for the three agents.
//!
//! Requests follow the common `/v1/chat/completions` wire format: `model`,
//! `messages`, `temperature`, `stop`, `max_tokens`, with bearer-token auth.
//! Transient failures (timeouts, 5xx, 429, connection errors) are retried
//! with jittered exponential backoff up to `max_attempts`.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendError, CallContext, ChatMessage, Clip, ContentPart, GroundingBackend, ImageUrl,
    MasterBackend, MessageContent, Role, VisionBackend,
};
use crate::action::ActionKind;
use crate::episode::{Episode, Question};

pub const MASTER_KEY_ENV: &str = "LVA_MASTER_API_KEY";
pub const GROUNDING_KEY_ENV: &str = "LVA_GROUNDING_API_KEY";
pub const VISION_KEY_ENV: &str = "LVA_VISION_API_KEY";

fn default_timeout_s() -> f64 {
    60.0
}
fn default_max_attempts() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_frames_per_call() -> usize {
    8
}

/// One chat-completion endpoint. Credentials never live here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Full URL of the chat-completions route.
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    /// Frames attached per vision call; ignored by the other roles.
    #[serde(default = "default_frames_per_call")]
    pub frames_per_call: usize,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            url: url.into(),
            model: model.into(),
            temperature: 0.0,
            max_tokens: None,
            timeout_s: default_timeout_s(),
            max_attempts: default_max_attempts(),
            backoff_base_ms: default_backoff_base_ms(),
            frames_per_call: default_frames_per_call(),
        }
    }
}

/// The assistant text plus the reported finish reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub finish_reason: Option<String>,
}

pub struct ChatClient {
    config: EndpointConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl ChatClient {
    pub fn new(config: EndpointConfig, api_key: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        ChatClient {
            config,
            api_key: api_key.into(),
            agent,
        }
    }

    /// Reads the bearer token from `key_env`.
    pub fn from_env(config: EndpointConfig, key_env: &str) -> Result<Self, BackendError> {
        let key = std::env::var(key_env)
            .map_err(|_| BackendError::MissingCredential(key_env.to_string()))?;
        Ok(Self::new(config, key))
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_base_ms as f64 * 2f64.powi(attempt as i32 - 1);
        let jitter: f64 = rand::rng().random_range(0.5..=1.0);
        Duration::from_secs_f64(base * jitter / 1000.0)
    }

    pub fn request_body(&self, messages: &[ChatMessage], stop: &[String]) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        if !stop.is_empty() {
            body["stop"] = json!(stop);
        }
        if let Some(n) = self.config.max_tokens {
            body["max_tokens"] = json!(n);
        }
        body
    }

    /// One logical completion, retried on transient failures.
    pub fn complete(
        &self,
        messages: &[ChatMessage],
        stop: &[String],
    ) -> Result<Completion, BackendError> {
        let body = self.request_body(messages, stop);
        let budget = self.config.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let err = match self.attempt(&body, attempt) {
                Ok(c) => return Ok(c),
                Err(e) if e.is_transient() && attempt < budget => e,
                Err(e) => return Err(e),
            };
            let wait = self.backoff(attempt);
            tracing::warn!(attempt, ?wait, error = %err, url = %self.config.url, "retrying");
            std::thread::sleep(wait);
        }
    }

    fn attempt(&self, body: &Value, attempts: u32) -> Result<Completion, BackendError> {
        let sent = self
            .agent
            .post(&self.config.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut resp = match sent {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout { attempts }),
            Err(e) => {
                return Err(BackendError::Transport {
                    message: e.to_string(),
                    attempts,
                })
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout { attempts }),
            Err(e) => {
                return Err(BackendError::Transport {
                    message: e.to_string(),
                    attempts,
                })
            }
        };
        match status {
            200..=299 => parse_completion(&text),
            401 | 403 => Err(BackendError::Auth { status }),
            408 => Err(BackendError::Timeout { attempts }),
            429 => Err(BackendError::RateLimited { attempts }),
            500..=599 => Err(BackendError::Server { status, attempts }),
            _ => Err(BackendError::Rejected { status, body: text }),
        }
    }
}

fn parse_completion(body: &str) -> Result<Completion, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?;
    let content = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .ok_or_else(|| BackendError::MalformedResponse("no message content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect(),
        Value::Null => String::new(),
        _ => return Err(BackendError::MalformedResponse("unexpected content type".into())),
    };
    Ok(Completion {
        text,
        finish_reason: choice
            .get("finish_reason")
            .and_then(Value::as_str)
            .map(str::to_string),
    })
}

/// Puts back the closing tag that a server swallowed as a stop sequence.
///
/// Only applies when the last protocol tag in `text` is an opening action
/// tag with nothing closing it. A `<request_grounding>` with nothing after
/// it is complete in its bare form and is left alone.
pub fn restore_stop_marker(text: &str) -> String {
    let last_open = ActionKind::ALL
        .iter()
        .filter_map(|&k| text.rfind(k.open_tag()).map(|i| (i, k)))
        .max_by_key(|&(i, _)| i);
    match last_open {
        Some((i, kind)) if !text[i..].contains(kind.close_tag()) => {
            let tail = &text[i + kind.open_tag().len()..];
            if kind.requires_payload() || !tail.trim().is_empty() {
                format!("{text}{}", kind.close_tag())
            } else {
                text.to_string()
            }
        }
        _ => text.to_string(),
    }
}

pub struct RemoteMaster {
    client: ChatClient,
}

impl RemoteMaster {
    pub fn new(client: ChatClient) -> Self {
        RemoteMaster { client }
    }
}

impl MasterBackend for RemoteMaster {
    fn generate(
        &self,
        _ctx: &CallContext<'_>,
        messages: &[ChatMessage],
        stop_markers: &[String],
    ) -> Result<String, BackendError> {
        let c = self.client.complete(messages, stop_markers)?;
        Ok(match c.finish_reason.as_deref() {
            Some("stop") => restore_stop_marker(&c.text),
            _ => c.text,
        })
    }
}

const GROUNDING_SYSTEM: &str = "You are a temporal grounding agent for long TV episodes. \
The user gives the episode subtitles grouped under clip tags and a question. \
Reply with exactly one clip tag, copied verbatim from the list, naming the clip most relevant to the question. \
Do not write anything else.";

/// Subtitles grouped by clip tag, as sent to the grounding agent.
pub fn grounding_prompt(episode: &Episode, question: &Question) -> String {
    let mut out = String::new();
    for clip in &episode.clips {
        out.push_str(&clip.tag());
        out.push('\n');
        for s in &episode.subtitles[clip.subtitle_range.clone()] {
            out.push_str(&s.spoken());
            out.push('\n');
        }
    }
    out.push_str(&format!("\nQuestion: {}\nClip tag:", question.text));
    out
}

/// First `<…>` tag in `reply` that names a clip of `episode`.
pub fn parse_clip_reply(episode: &Episode, reply: &str) -> Option<String> {
    let mut rest = reply;
    while let Some(start) = rest.find('<') {
        let after = &rest[start + 1..];
        let end = after.find('>')?;
        if let Some(c) = episode.resolve_clip_tag(&after[..end]) {
            return Some(c.clip_id.clone());
        }
        rest = &after[end + 1..];
    }
    let bare = reply.trim();
    episode.clip(bare).map(|c| c.clip_id.clone())
}

pub struct RemoteGrounding {
    client: ChatClient,
}

impl RemoteGrounding {
    pub fn new(client: ChatClient) -> Self {
        RemoteGrounding { client }
    }
}

impl GroundingBackend for RemoteGrounding {
    fn ground(
        &self,
        _ctx: &CallContext<'_>,
        episode: &Episode,
        question: &Question,
    ) -> Result<String, BackendError> {
        let mut messages = vec![
            ChatMessage::system(GROUNDING_SYSTEM),
            ChatMessage::user(grounding_prompt(episode, question)),
        ];
        let first = self.client.complete(&messages, &[])?.text;
        if let Some(id) = parse_clip_reply(episode, &first) {
            return Ok(id);
        }
        let example = episode.clips.first().map(|c| c.tag()).unwrap_or_default();
        messages.push(ChatMessage::assistant(first));
        messages.push(ChatMessage::user(format!(
            "That is not a clip tag from the list. Reply with exactly one tag such as {example}."
        )));
        let second = self.client.complete(&messages, &[])?.text;
        parse_clip_reply(episode, &second).ok_or(BackendError::MalformedResponse(format!(
            "no clip tag in grounding reply `{second}`"
        )))
    }
}

/// Up to `n` evenly spaced items, taking the centre of each stride.
pub fn sample_evenly<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if n == 0 || items.is_empty() {
        return Vec::new();
    }
    if items.len() <= n {
        return items.to_vec();
    }
    (0..n)
        .map(|k| items[((2 * k + 1) * items.len()) / (2 * n)].clone())
        .collect()
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/jpeg",
    }
}

/// Turns an opaque frame reference into a content part.
///
/// URLs pass through; readable files become base64 data URLs; anything else
/// (for example a bare frame index) is mentioned as text.
pub fn frame_part(frame_ref: &str) -> ContentPart {
    if frame_ref.starts_with("http://")
        || frame_ref.starts_with("https://")
        || frame_ref.starts_with("data:")
    {
        return ContentPart::ImageUrl {
            image_url: ImageUrl {
                url: frame_ref.to_string(),
            },
        };
    }
    let path = Path::new(frame_ref);
    match std::fs::read(path) {
        Ok(bytes) => ContentPart::ImageUrl {
            image_url: ImageUrl {
                url: format!(
                    "data:{};base64,{}",
                    mime_for(path),
                    base64::engine::general_purpose::STANDARD.encode(bytes)
                ),
            },
        },
        Err(_) => ContentPart::Text {
            text: format!("[frame {frame_ref}]"),
        },
    }
}

const VISION_SYSTEM: &str = "You are a vision agent. You receive frames sampled from a localized \
segment of a TV episode and a query. Describe only what is visible that answers the query: \
objects, people, attributes, actions, on-screen text and scene cues. Reply in plain text.";

pub struct RemoteVision {
    client: ChatClient,
}

impl RemoteVision {
    pub fn new(client: ChatClient) -> Self {
        RemoteVision { client }
    }

    pub fn request_messages(&self, query: &str, clip: &Clip, window_clips: &[Clip]) -> Vec<ChatMessage> {
        let frames: Vec<String> = window_clips
            .iter()
            .flat_map(|c| c.frame_refs.iter().cloned())
            .collect();
        let mut parts = vec![ContentPart::Text {
            text: format!("Segment {}. Query: {query}", clip.tag()),
        }];
        parts.extend(
            sample_evenly(&frames, self.client.config().frames_per_call)
                .iter()
                .map(|f| frame_part(f)),
        );
        vec![
            ChatMessage::system(VISION_SYSTEM),
            ChatMessage {
                role: Role::User,
                content: MessageContent::Parts(parts),
            },
        ]
    }
}

impl VisionBackend for RemoteVision {
    fn describe(
        &self,
        _ctx: &CallContext<'_>,
        query: &str,
        clip: &Clip,
        window_clips: &[Clip],
    ) -> Result<String, BackendError> {
        let messages = self.request_messages(query, clip, window_clips);
        let text = self.client.complete(&messages, &[])?.text;
        let text = text.trim();
        if text.is_empty() {
            return Err(BackendError::MalformedResponse("empty vision description".into()));
        }
        Ok(text.to_string())
    }
}
