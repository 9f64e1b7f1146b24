//! The bounded master loop.
//!
//! Each step the master produces one turn (cut at the first stop marker),
//! the turn is parsed, and the matching agent is invoked:
//!
//! * `<request_grounding>`: ground the question, make the returned clip
//!   current, inject its tag plus the subtitles of its window run;
//! * `<visual_query>`: describe the current clip, inject the observation
//!   (or a notice if nothing is grounded yet, without calling vision);
//! * `<answer>`: normalize and stop;
//! * anything else: inject the rethink message.
//!
//! Every non-answer branch consumes a step. After `max_steps` steps the run
//! ends without an answer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{
    normalize_answer, parse_action, stop_markers, structural_validity, truncate_at_stop,
    ActionKind, ParsedAction, StructuralVerdict, DEFAULT_EOS_MARKER,
};
use crate::backend::{BackendError, BackendKind, Backends, CallContext, ChatMessage};
use crate::episode::{Episode, Question};
use crate::protocol;

fn default_max_steps() -> usize {
    5
}
fn default_window() -> usize {
    1
}
fn default_eos() -> String {
    DEFAULT_EOS_MARKER.to_string()
}
fn default_system_prompt() -> String {
    protocol::SYSTEM_PROMPT.to_string()
}
fn default_answer_prefix() -> String {
    protocol::ANSWER_PREFIX.to_string()
}
fn default_rethink() -> String {
    protocol::RETHINK_MESSAGE.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_eos")]
    pub eos_marker: String,
    #[serde(default = "default_system_prompt")]
    pub system_prompt: String,
    #[serde(default = "default_answer_prefix")]
    pub answer_prefix: String,
    #[serde(default = "default_rethink")]
    pub rethink_message: String,
    /// Opt-in extra master call after step exhaustion.
    #[serde(default)]
    pub force_answer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_steps: default_max_steps(),
            window: default_window(),
            eos_marker: default_eos(),
            system_prompt: default_system_prompt(),
            answer_prefix: default_answer_prefix(),
            rethink_message: default_rethink(),
            force_answer: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("max_steps must be at least 1")]
    ZeroSteps,
    #[error("window must be at least 1")]
    ZeroWindow,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_steps == 0 {
            return Err(ConfigError::ZeroSteps);
        }
        if self.window == 0 {
            return Err(ConfigError::ZeroWindow);
        }
        Ok(())
    }
}

/// What the orchestrator did with a turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dispatch {
    Grounding { clip_id: String },
    Vision,
    VisionBlocked,
    Rethink,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub step: usize,
    pub master_text: String,
    pub action: Option<ParsedAction>,
    pub verdict: StructuralVerdict,
    pub dispatch: Dispatch,
    pub injected: Option<String>,
    pub current_clip: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub episode_id: String,
    pub config: RunConfig,
    pub turns: Vec<TurnRecord>,
    /// Normalized answer text, present iff the run ended on `<answer>`.
    pub final_answer: Option<String>,
    /// `answer_prefix` followed by the normalized answer.
    pub final_response: Option<String>,
    /// Answer obtained by the forced-answer fallback, if it ran and succeeded.
    pub forced_answer: Option<String>,
    pub terminated_by: Termination,
    pub grounded_clips: Vec<String>,
}

impl Trajectory {
    pub fn vision_calls(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.dispatch == Dispatch::Vision)
            .count()
    }

    pub fn grounding_calls(&self) -> usize {
        self.grounded_clips.len()
    }

    /// The answer used for scoring: the natural one, else a forced one.
    pub fn scored_answer(&self) -> Option<&str> {
        self.final_answer
            .as_deref()
            .or(self.forced_answer.as_deref())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trajectory serializes");
        s.push('\n');
        s
    }
}

/// A backend failed mid-run. The turns completed so far are kept.
#[derive(Debug, Error)]
#[error("{backend} backend failed at step {step}: {source}")]
pub struct RunError {
    pub step: usize,
    pub backend: BackendKind,
    pub source: BackendError,
    pub partial: Box<Trajectory>,
}

/// The first user message: timestamped subtitles, question and choices.
pub fn question_prompt(episode: &Episode, question: &Question) -> String {
    format!(
        "Subtitles:\n{}\n\nQuestion: {}\nChoices:\n{}",
        episode.transcript(),
        question.text,
        question.labeled_choices().join("\n")
    )
}

/// The chat transcript the master sees before its next turn.
pub fn assemble_context(
    episode: &Episode,
    question: &Question,
    prior_turns: &[TurnRecord],
    config: &RunConfig,
) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(2 + 2 * prior_turns.len());
    messages.push(ChatMessage::system(config.system_prompt.clone()));
    messages.push(ChatMessage::user(question_prompt(episode, question)));
    for turn in prior_turns {
        messages.push(ChatMessage::assistant(turn.master_text.clone()));
        if let Some(inj) = &turn.injected {
            messages.push(ChatMessage::user(inj.clone()));
        }
    }
    messages
}

struct Counters {
    master: usize,
    grounding: usize,
    vision: usize,
}

struct Run<'a> {
    episode: &'a Episode,
    question: &'a Question,
    backends: &'a Backends,
    config: &'a RunConfig,
    trajectory: Trajectory,
    current_clip: Option<String>,
    calls: Counters,
}

impl<'a> Run<'a> {
    fn ctx(&self, step: usize, call_index: usize) -> CallContext<'a> {
        CallContext {
            question_id: &self.question.question_id,
            step,
            call_index,
        }
    }

    fn fail(self, step: usize, backend: BackendKind, source: BackendError) -> RunError {
        RunError {
            step,
            backend,
            source,
            partial: Box::new(self.trajectory),
        }
    }

    fn generate(&mut self, step: usize, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let ctx = self.ctx(step, self.calls.master);
        self.calls.master += 1;
        let stops = stop_markers(&self.config.eos_marker);
        let raw = self.backends.master.generate(&ctx, messages, &stops)?;
        Ok(truncate_at_stop(&raw, &self.config.eos_marker).to_string())
    }

    fn ground(&mut self, step: usize) -> Result<String, BackendError> {
        let ctx = self.ctx(step, self.calls.grounding);
        self.calls.grounding += 1;
        let reply = self.backends.grounding.ground(&ctx, self.episode, self.question)?;
        self.episode
            .resolve_clip_tag(&reply)
            .map(|c| c.clip_id.clone())
            .ok_or(BackendError::UnresolvableClip(reply))
    }

    fn describe(&mut self, step: usize, query: &str, clip_id: &str) -> Result<String, BackendError> {
        let ctx = self.ctx(step, self.calls.vision);
        self.calls.vision += 1;
        let clip = self
            .episode
            .clip(clip_id)
            .ok_or_else(|| BackendError::UnresolvableClip(clip_id.to_string()))?;
        let window = self
            .episode
            .window_clips(clip_id, self.config.window)
            .map_err(|e| BackendError::UnresolvableClip(e.to_string()))?;
        let text = self.backends.vision.describe(&ctx, query, clip, window)?;
        if text.trim().is_empty() {
            return Err(BackendError::MalformedResponse(
                "empty vision description".into(),
            ));
        }
        Ok(text)
    }
}

/// Runs one question to an answer or to step exhaustion.
///
/// With `config.force_answer` set, an exhausted run gets one extra master
/// call via [`force_answer`]; its result lands in `forced_answer`.
pub fn run_trajectory(
    episode: &Episode,
    question: &Question,
    backends: &Backends,
    config: &RunConfig,
) -> Result<Trajectory, RunError> {
    let mut run = Run {
        episode,
        question,
        backends,
        config,
        trajectory: Trajectory {
            question_id: question.question_id.clone(),
            episode_id: episode.episode_id.clone(),
            config: config.clone(),
            turns: Vec::new(),
            final_answer: None,
            final_response: None,
            forced_answer: None,
            terminated_by: Termination::StepLimit,
            grounded_clips: Vec::new(),
        },
        current_clip: None,
        calls: Counters {
            master: 0,
            grounding: 0,
            vision: 0,
        },
    };

    for step in 0..config.max_steps {
        let messages = assemble_context(episode, question, &run.trajectory.turns, config);
        let master_text = match run.generate(step, &messages) {
            Ok(t) => t,
            Err(e) => return Err(run.fail(step, BackendKind::Master, e)),
        };
        let verdict = structural_validity(&master_text);
        let action = parse_action(&master_text);

        let (dispatch, injected) = match action.as_ref().map(|a| a.kind) {
            Some(ActionKind::Answer) => {
                let payload = &action.as_ref().expect("answer action").payload;
                let answer = normalize_answer(payload).text;
                run.trajectory.final_response = Some(format!("{}{answer}", config.answer_prefix));
                run.trajectory.final_answer = Some(answer);
                run.trajectory.terminated_by = Termination::Answer;
                (Dispatch::Answer, None)
            }
            Some(ActionKind::RequestGrounding) => {
                let clip_id = match run.ground(step) {
                    Ok(c) => c,
                    Err(e) => return Err(run.fail(step, BackendKind::Grounding, e)),
                };
                let subs = episode
                    .subtitles_for(&clip_id, config.window)
                    .expect("resolved clip and validated window");
                let tag = format!("<{clip_id}>");
                run.current_clip = Some(clip_id.clone());
                run.trajectory.grounded_clips.push(clip_id.clone());
                (
                    Dispatch::Grounding { clip_id },
                    Some(protocol::grounding_injection(&tag, &subs)),
                )
            }
            Some(ActionKind::VisualQuery) => match run.current_clip.clone() {
                None => (
                    Dispatch::VisionBlocked,
                    Some(protocol::NO_GROUNDING_NOTICE.to_string()),
                ),
                Some(clip_id) => {
                    let query = action.as_ref().expect("query action").payload.clone();
                    match run.describe(step, &query, &clip_id) {
                        Ok(d) => (Dispatch::Vision, Some(protocol::vision_injection(&d))),
                        Err(e) => return Err(run.fail(step, BackendKind::Vision, e)),
                    }
                }
            },
            None => (Dispatch::Rethink, Some(config.rethink_message.clone())),
        };

        let done = dispatch == Dispatch::Answer;
        run.trajectory.turns.push(TurnRecord {
            step,
            master_text,
            action,
            verdict,
            dispatch,
            injected,
            current_clip: run.current_clip.clone(),
        });
        if done {
            return Ok(run.trajectory);
        }
    }

    if config.force_answer {
        let step = run.trajectory.turns.len();
        match force_answer(&run.trajectory, episode, question, backends) {
            Ok(a) => run.trajectory.forced_answer = a,
            Err(e) => return Err(run.fail(step, BackendKind::Master, e)),
        }
    }
    Ok(run.trajectory)
}

/// One extra master call asking for an answer now.
///
/// Returns `None` without calling anything unless the trajectory ran out of
/// steps and its config enables the fallback. The answer comes back
/// normalized.
pub fn force_answer(
    trajectory: &Trajectory,
    episode: &Episode,
    question: &Question,
    backends: &Backends,
) -> Result<Option<String>, BackendError> {
    let config = &trajectory.config;
    if !config.force_answer || trajectory.terminated_by != Termination::StepLimit {
        return Ok(None);
    }
    let mut messages = assemble_context(episode, question, &trajectory.turns, config);
    messages.push(ChatMessage::user(protocol::FORCE_ANSWER_MESSAGE));
    let ctx = CallContext {
        question_id: &question.question_id,
        step: trajectory.turns.len(),
        call_index: trajectory.turns.len(),
    };
    let raw = backends
        .master
        .generate(&ctx, &messages, &stop_markers(&config.eos_marker))?;
    let text = truncate_at_stop(&raw, &config.eos_marker);
    Ok(parse_action(text)
        .filter(|a| a.kind == ActionKind::Answer)
        .map(|a| normalize_answer(&a.payload).text))
}
