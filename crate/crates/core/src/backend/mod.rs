//! Contracts for the three agents and the chat message model they share.
//!
//! The master turns a chat transcript into text, the grounding agent maps a
//! question onto one clip of the episode, and the vision agent turns a query
//! about a clip into a textual observation. Two families implement them:
//! [`remote`] talks to chat-completion HTTP endpoints, [`scripted`] replays
//! deterministic fixtures.

pub mod remote;
pub mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{Clip, Episode, Question};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: MessageContent,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: MessageContent::Text(text.into()),
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::text(Role::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::text(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::text(Role::Assistant, text)
    }

    /// The plain text of a text-only message.
    pub fn as_text(&self) -> Option<&str> {
        match &self.content {
            MessageContent::Text(t) => Some(t),
            MessageContent::Parts(_) => None,
        }
    }
}

/// Who is calling a backend and where in the trajectory the call sits.
///
/// `call_index` counts calls to the same backend kind within one
/// trajectory, starting at 0. Remote backends ignore all of it; scripted
/// ones key their replay on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallContext<'a> {
    pub question_id: &'a str,
    pub step: usize,
    pub call_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Master,
    Grounding,
    Vision,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Master => "master",
            BackendKind::Grounding => "grounding",
            BackendKind::Vision => "vision",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("server error HTTP {status} after {attempts} attempts")]
    Server { status: u16, attempts: u32 },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { message: String, attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("no fixture for question `{0}`")]
    UnknownQuestion(String),
    #[error("fixture for question `{0}` has neither a master script nor a policy")]
    NoMasterScript(String),
    #[error("grounding returned `{0}`, which is not a clip of this episode")]
    UnresolvableClip(String),
}

impl BackendError {
    /// Whether a retry with backoff may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendError::RateLimited { .. }
                | BackendError::Timeout { .. }
                | BackendError::Server { .. }
                | BackendError::Transport { .. }
        )
    }
}

/// Text generation for the master agent.
///
/// Implementations should stop at the first of `stop_markers`; the caller
/// truncates again regardless.
pub trait MasterBackend: Send + Sync {
    fn generate(
        &self,
        ctx: &CallContext<'_>,
        messages: &[ChatMessage],
        stop_markers: &[String],
    ) -> Result<String, BackendError>;
}

/// Temporal localization: returns the id of one clip of `episode`.
pub trait GroundingBackend: Send + Sync {
    fn ground(
        &self,
        ctx: &CallContext<'_>,
        episode: &Episode,
        question: &Question,
    ) -> Result<String, BackendError>;
}

/// Frame description for the localized clip and its window neighbours.
pub trait VisionBackend: Send + Sync {
    fn describe(
        &self,
        ctx: &CallContext<'_>,
        query: &str,
        clip: &Clip,
        window_clips: &[Clip],
    ) -> Result<String, BackendError>;
}

/// The three agents used by one run. Cheap to clone.
#[derive(Clone)]
pub struct Backends {
    pub master: Arc<dyn MasterBackend>,
    pub grounding: Arc<dyn GroundingBackend>,
    pub vision: Arc<dyn VisionBackend>,
}

impl Backends {
    pub fn new(
        master: Arc<dyn MasterBackend>,
        grounding: Arc<dyn GroundingBackend>,
        vision: Arc<dyn VisionBackend>,
    ) -> Self {
        Backends {
            master,
            grounding,
            vision,
        }
    }

    /// All three roles served by one object.
    pub fn uniform<B>(backend: Arc<B>) -> Self
    where
        B: MasterBackend + GroundingBackend + VisionBackend + 'static,
    {
        Backends {
            master: backend.clone(),
            grounding: backend.clone(),
            vision: backend,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_wire_shape() {
        let m = ChatMessage::user("hi");
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"role":"user","content":"hi"}"#
        );
        let parts = ChatMessage {
            role: Role::User,
            content: MessageContent::Parts(vec![
                ContentPart::Text { text: "q".into() },
                ContentPart::ImageUrl {
                    image_url: ImageUrl {
                        url: "http://x/f.jpg".into(),
                    },
                },
            ]),
        };
        assert_eq!(
            serde_json::to_string(&parts).unwrap(),
            r#"{"role":"user","content":[{"type":"text","text":"q"},{"type":"image_url","image_url":{"url":"http://x/f.jpg"}}]}"#
        );
    }
}
