//! Episode-level data model: an hour-scale timeline of clips, subtitles,
//! frame references and multiple-choice questions.

mod builder;
mod manifest;
pub mod srt;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::ops::{Range, RangeInclusive};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builder::{
    build_dataset_dir, build_episode, clip_order_key, BoxRecord, BuildError, ClipRecord,
    LocalSubtitle, QaRecord,
};
pub use manifest::{load_dataset_dir, ManifestError, SCHEMA_VERSION};

/// Number of answer options per question.
pub const NUM_CHOICES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtitleLine {
    pub start_s: f64,
    pub end_s: f64,
    pub speaker: Option<String>,
    pub text: String,
}

impl SubtitleLine {
    /// `Speaker: text`, or just the text when there is no speaker.
    pub fn spoken(&self) -> String {
        match &self.speaker {
            Some(s) => format!("{s}: {}", self.text),
            None => self.text.clone(),
        }
    }

    /// `[start–end] Speaker: text` with two-decimal timestamps.
    pub fn timestamped(&self) -> String {
        format!("[{:.2}–{:.2}] {}", self.start_s, self.end_s, self.spoken())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: String,
    pub index: usize,
    pub duration_s: f64,
    pub offset_s: f64,
    pub subtitle_range: Range<usize>,
    pub frame_refs: Vec<String>,
}

impl Clip {
    /// The symbolic tag naming this clip, e.g. `<s05e06_seg02_clip_15>`.
    pub fn tag(&self) -> String {
        format!("<{}>", self.clip_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub clip_id: String,
    pub frame_index: usize,
    pub entity: String,
    /// `(x, y, w, h)` in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub episode_id: String,
    pub text: String,
    /// Option texts in label order `a0..a4`.
    pub choices: Vec<String>,
    pub gold_index: usize,
    pub gold_clip_id: String,
}

impl Question {
    pub fn choice_label(index: usize) -> String {
        format!("a{index}")
    }

    pub fn gold_label(&self) -> String {
        Self::choice_label(self.gold_index)
    }

    pub fn gold_text(&self) -> Option<&str> {
        self.choices.get(self.gold_index).map(String::as_str)
    }

    /// `a0: …` lines, one per option.
    pub fn labeled_choices(&self) -> Vec<String> {
        self.choices
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}: {c}", Self::choice_label(i)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub schema_version: u32,
    pub episode_id: String,
    pub clips: Vec<Clip>,
    pub subtitles: Vec<SubtitleLine>,
    pub questions: Vec<Question>,
    pub boxes: Vec<BoxAnnotation>,
}

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("unknown clip `{0}`")]
    UnknownClip(String),
    #[error("unknown question `{0}`")]
    UnknownQuestion(String),
    #[error("window must be at least 1")]
    ZeroWindow,
}

/// The clip indices covered by a window of `window` consecutive clips
/// centred on `center`, clamped to `0..n_clips`.
///
/// Even windows lean one clip later in time: window 2 on clip 5 is `{5, 6}`.
pub fn window_run(n_clips: usize, center: usize, window: usize) -> RangeInclusive<usize> {
    debug_assert!(window >= 1 && center < n_clips);
    let before = (window - 1) / 2;
    let after = window - 1 - before;
    let start = center.saturating_sub(before);
    let end = (center + after).min(n_clips.saturating_sub(1));
    start..=end
}

impl Episode {
    pub fn total_duration_s(&self) -> f64 {
        self.clips.iter().map(|c| c.duration_s).sum()
    }

    pub fn clip(&self, clip_id: &str) -> Option<&Clip> {
        self.clips.iter().find(|c| c.clip_id == clip_id)
    }

    pub fn clip_index(&self, clip_id: &str) -> Option<usize> {
        self.clips.iter().position(|c| c.clip_id == clip_id)
    }

    pub fn question(&self, question_id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.question_id == question_id)
    }

    /// Resolves a clip tag as emitted by an agent.
    ///
    /// Accepts the verbatim id with or without angle brackets, and the
    /// positional aliases `<clip_X>` / `<clipX>` where X is the clip index.
    pub fn resolve_clip_tag(&self, tag: &str) -> Option<&Clip> {
        let bare = tag.trim().trim_start_matches('<').trim_end_matches('>').trim();
        if let Some(c) = self.clip(bare) {
            return Some(c);
        }
        let idx = bare
            .strip_prefix("clip_")
            .or_else(|| bare.strip_prefix("clip"))?
            .parse::<usize>()
            .ok()?;
        self.clips.get(idx)
    }

    /// Clips in the window run around `clip_id`.
    pub fn window_clips(&self, clip_id: &str, window: usize) -> Result<&[Clip], EpisodeError> {
        if window == 0 {
            return Err(EpisodeError::ZeroWindow);
        }
        let center = self
            .clip_index(clip_id)
            .ok_or_else(|| EpisodeError::UnknownClip(clip_id.to_string()))?;
        let run = window_run(self.clips.len(), center, window);
        Ok(&self.clips[*run.start()..=*run.end()])
    }

    /// Subtitle text for the window run around `clip_id`, one line per
    /// subtitle, speaker-prefixed when known.
    pub fn subtitles_for(&self, clip_id: &str, window: usize) -> Result<String, EpisodeError> {
        let lines: Vec<String> = self
            .window_clips(clip_id, window)?
            .iter()
            .flat_map(|c| self.subtitles[c.subtitle_range.clone()].iter())
            .map(SubtitleLine::spoken)
            .collect();
        Ok(lines.join("\n"))
    }

    /// The full timestamped subtitle track, one line per subtitle.
    pub fn transcript(&self) -> String {
        self.subtitles
            .iter()
            .map(SubtitleLine::timestamped)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpisodeViolation {
    UnsortedSubtitles { index: usize },
    InvalidSubtitleSpan { index: usize },
    DuplicateClipId { clip_id: String },
    ClipIndexMismatch { clip_id: String, expected: usize, found: usize },
    NonCumulativeOffset { clip_id: String, expected: f64, found: f64 },
    SubtitleRangeOutOfBounds { clip_id: String },
    DuplicateQuestionId { question_id: String },
    DanglingGoldClip { question_id: String, clip_id: String },
    BadChoiceCount { question_id: String, count: usize },
    GoldIndexOutOfRange { question_id: String, gold_index: usize },
    QuestionEpisodeMismatch { question_id: String, episode_id: String },
    DanglingBoxClip { clip_id: String },
    BoxFrameOutOfRange { clip_id: String, frame_index: usize },
}

impl fmt::Display for EpisodeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match serde_json::to_string(self) {
            Ok(s) => f.write_str(&s),
            Err(_) => write!(f, "{self:?}"),
        }
    }
}

fn offsets_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Lists every invariant violation in `episode`; empty means valid.
pub fn validate_episode(episode: &Episode) -> Vec<EpisodeViolation> {
    use EpisodeViolation as V;
    let mut out = Vec::new();

    for (i, s) in episode.subtitles.iter().enumerate() {
        if !(s.start_s >= 0.0 && s.start_s < s.end_s) {
            out.push(V::InvalidSubtitleSpan { index: i });
        }
    }
    for (i, pair) in episode.subtitles.windows(2).enumerate() {
        if pair[1].start_s < pair[0].start_s {
            out.push(V::UnsortedSubtitles { index: i + 1 });
        }
    }

    let mut seen = HashSet::new();
    let mut expected_offset = 0.0;
    for (i, clip) in episode.clips.iter().enumerate() {
        if !seen.insert(clip.clip_id.as_str()) {
            out.push(V::DuplicateClipId {
                clip_id: clip.clip_id.clone(),
            });
        }
        if clip.index != i {
            out.push(V::ClipIndexMismatch {
                clip_id: clip.clip_id.clone(),
                expected: i,
                found: clip.index,
            });
        }
        if !offsets_match(clip.offset_s, expected_offset) {
            out.push(V::NonCumulativeOffset {
                clip_id: clip.clip_id.clone(),
                expected: expected_offset,
                found: clip.offset_s,
            });
        }
        expected_offset += clip.duration_s;
        let r = &clip.subtitle_range;
        if r.start > r.end || r.end > episode.subtitles.len() {
            out.push(V::SubtitleRangeOutOfBounds {
                clip_id: clip.clip_id.clone(),
            });
        }
    }

    let mut qids = HashSet::new();
    for q in &episode.questions {
        if !qids.insert(q.question_id.as_str()) {
            out.push(V::DuplicateQuestionId {
                question_id: q.question_id.clone(),
            });
        }
        if q.episode_id != episode.episode_id {
            out.push(V::QuestionEpisodeMismatch {
                question_id: q.question_id.clone(),
                episode_id: q.episode_id.clone(),
            });
        }
        if q.choices.len() != NUM_CHOICES {
            out.push(V::BadChoiceCount {
                question_id: q.question_id.clone(),
                count: q.choices.len(),
            });
        }
        if q.gold_index >= NUM_CHOICES {
            out.push(V::GoldIndexOutOfRange {
                question_id: q.question_id.clone(),
                gold_index: q.gold_index,
            });
        }
        if episode.clip(&q.gold_clip_id).is_none() {
            out.push(V::DanglingGoldClip {
                question_id: q.question_id.clone(),
                clip_id: q.gold_clip_id.clone(),
            });
        }
    }

    let frames: HashMap<&str, usize> = episode
        .clips
        .iter()
        .map(|c| (c.clip_id.as_str(), c.frame_refs.len()))
        .collect();
    for b in &episode.boxes {
        match frames.get(b.clip_id.as_str()) {
            None => out.push(V::DanglingBoxClip {
                clip_id: b.clip_id.clone(),
            }),
            Some(&n) if b.frame_index >= n => out.push(V::BoxFrameOutOfRange {
                clip_id: b.clip_id.clone(),
                frame_index: b.frame_index,
            }),
            _ => {}
        }
    }
    out
}
