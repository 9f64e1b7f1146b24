//! Aggregates clip-level records into episode-level timelines.
//!
//! Clips are ordered by the segment/clip numbers embedded in their ids and
//! tiled back to back: each clip's offset is the sum of the durations before
//! it, and every clip-local subtitle timestamp is shifted by that offset.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use super::srt::{parse_srt, SrtError};
use super::{BoxAnnotation, Clip, Episode, Question, SubtitleLine, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSubtitle {
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default)]
    pub speaker: Option<String>,
    pub text: String,
}

/// One clip as it appears in the clip-level source layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    #[serde(default)]
    pub episode_id: Option<String>,
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub subtitles: Vec<LocalSubtitle>,
    #[serde(default)]
    pub frame_refs: Vec<String>,
}

/// A TVQA-style question record. `vid_name` is the clip holding the moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    #[serde(deserialize_with = "string_or_number")]
    pub qid: String,
    pub q: String,
    pub a0: String,
    pub a1: String,
    pub a2: String,
    pub a3: String,
    pub a4: String,
    pub answer_idx: usize,
    pub vid_name: String,
    /// Clip-local moment, `"start-end"` in seconds. Kept for reference only.
    #[serde(default)]
    pub ts: Option<String>,
}

/// A TVQA+-style box on one frame of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub vid_name: String,
    pub frame_index: usize,
    pub label: String,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        S(String),
        N(serde_json::Number),
    }
    Ok(match Id::deserialize(d)? {
        Id::S(s) => s,
        Id::N(n) => n.to_string(),
    })
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("duplicate clip id `{0}`")]
    DuplicateClipId(String),
    #[error("clip `{0}` has no duration and cannot be placed on the timeline")]
    MissingDuration(String),
    #[error("question `{question_id}` references unknown clip `{clip_id}`")]
    DanglingGoldClip { question_id: String, clip_id: String },
    #[error("box references unknown clip `{0}`")]
    DanglingBoxClip(String),
    #[error("box on clip `{clip_id}` uses frame {frame_index} outside its {n_frames} frames")]
    BoxFrameOutOfRange {
        clip_id: String,
        frame_index: usize,
        n_frames: usize,
    },
    #[error("question `{question_id}` has answer index {answer_idx} outside a0..a4")]
    BadAnswerIndex { question_id: String, answer_idx: usize },
    #[error("clip `{clip_id}` subtitle {index} has an empty or negative span")]
    InvalidSubtitle { clip_id: String, index: usize },
    #[error("records span several episodes: `{0}` and `{1}`")]
    MixedEpisodes(String, String),
    #[error("cannot determine an episode id for clip `{0}`")]
    MissingEpisodeId(String),
    #[error("no clip records")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Srt { path: PathBuf, source: SrtError },
}

/// Sort key `(segment, clip, id)` parsed from ids like `s05e06_seg02_clip_15`.
pub fn clip_order_key(clip_id: &str) -> (Option<u32>, Option<u32>, String) {
    fn number_after(s: &str, marker: &str) -> Option<u32> {
        let rest = &s[s.rfind(marker)? + marker.len()..];
        let rest = rest.trim_start_matches('_');
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        digits.parse().ok()
    }
    (
        number_after(clip_id, "seg"),
        number_after(clip_id, "clip"),
        clip_id.to_string(),
    )
}

fn episode_id_of(record: &ClipRecord) -> Result<String, BuildError> {
    if let Some(id) = &record.episode_id {
        return Ok(id.clone());
    }
    match record.clip_id.find("_seg") {
        Some(i) if i > 0 => Ok(record.clip_id[..i].to_string()),
        _ => Err(BuildError::MissingEpisodeId(record.clip_id.clone())),
    }
}

/// Builds one episode from the clip, QA and box records that belong to it.
pub fn build_episode(
    mut clip_records: Vec<ClipRecord>,
    qa_records: Vec<QaRecord>,
    box_records: Vec<BoxRecord>,
) -> Result<Episode, BuildError> {
    let first = clip_records.first().ok_or(BuildError::Empty)?;
    let episode_id = episode_id_of(first)?;
    let mut seen = HashSet::new();
    for r in &clip_records {
        let id = episode_id_of(r)?;
        if id != episode_id {
            return Err(BuildError::MixedEpisodes(episode_id, id));
        }
        if !seen.insert(r.clip_id.clone()) {
            return Err(BuildError::DuplicateClipId(r.clip_id.clone()));
        }
        if r.duration_s.is_none() {
            return Err(BuildError::MissingDuration(r.clip_id.clone()));
        }
    }
    clip_records.sort_by_cached_key(|r| clip_order_key(&r.clip_id));

    let mut clips = Vec::with_capacity(clip_records.len());
    let mut subtitles = Vec::new();
    let mut offset = 0.0;
    for (index, record) in clip_records.into_iter().enumerate() {
        let duration = record.duration_s.unwrap_or_default();
        let mut local = record.subtitles;
        for (i, s) in local.iter().enumerate() {
            if !(s.start_s >= 0.0 && s.start_s < s.end_s) {
                return Err(BuildError::InvalidSubtitle {
                    clip_id: record.clip_id.clone(),
                    index: i,
                });
            }
        }
        local.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let start = subtitles.len();
        subtitles.extend(local.into_iter().map(|s| SubtitleLine {
            start_s: s.start_s + offset,
            end_s: s.end_s + offset,
            speaker: s.speaker,
            text: s.text,
        }));
        clips.push(Clip {
            clip_id: record.clip_id,
            index,
            duration_s: duration,
            offset_s: offset,
            subtitle_range: start..subtitles.len(),
            frame_refs: record.frame_refs,
        });
        offset += duration;
    }

    let clip_frames: HashMap<&str, usize> = clips
        .iter()
        .map(|c| (c.clip_id.as_str(), c.frame_refs.len()))
        .collect();

    let mut questions = Vec::with_capacity(qa_records.len());
    for qa in qa_records {
        if !clip_frames.contains_key(qa.vid_name.as_str()) {
            return Err(BuildError::DanglingGoldClip {
                question_id: qa.qid,
                clip_id: qa.vid_name,
            });
        }
        if qa.answer_idx >= super::NUM_CHOICES {
            return Err(BuildError::BadAnswerIndex {
                question_id: qa.qid,
                answer_idx: qa.answer_idx,
            });
        }
        questions.push(Question {
            question_id: qa.qid,
            episode_id: episode_id.clone(),
            text: qa.q,
            choices: vec![qa.a0, qa.a1, qa.a2, qa.a3, qa.a4],
            gold_index: qa.answer_idx,
            gold_clip_id: qa.vid_name,
        });
    }

    let mut boxes = Vec::with_capacity(box_records.len());
    for b in box_records {
        let n_frames = *clip_frames
            .get(b.vid_name.as_str())
            .ok_or_else(|| BuildError::DanglingBoxClip(b.vid_name.clone()))?;
        if b.frame_index >= n_frames {
            return Err(BuildError::BoxFrameOutOfRange {
                clip_id: b.vid_name,
                frame_index: b.frame_index,
                n_frames,
            });
        }
        boxes.push(BoxAnnotation {
            clip_id: b.vid_name,
            frame_index: b.frame_index,
            entity: b.label,
            bbox: [b.left, b.top, b.width, b.height],
        });
    }

    Ok(Episode {
        schema_version: SCHEMA_VERSION,
        episode_id,
        clips,
        subtitles,
        questions,
        boxes,
    })
}

fn read_to_string(path: &Path) -> Result<String, BuildError> {
    fs::read_to_string(path).map_err(|source| BuildError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BuildError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| BuildError::Json {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

/// Builds every episode found in a clip-level source directory.
///
/// Layout: `clips/*.json` (one [`ClipRecord`] each, with an optional sibling
/// `<clip_id>.srt` used when the record carries no inline subtitles),
/// `qa.jsonl` ([`QaRecord`] per line) and `boxes.jsonl` ([`BoxRecord`] per
/// line). Episodes come back sorted by id.
pub fn build_dataset_dir(dir: &Path) -> Result<Vec<Episode>, BuildError> {
    let clips_dir = dir.join("clips");
    let mut entries: Vec<PathBuf> = fs::read_dir(&clips_dir)
        .map_err(|source| BuildError::Io {
            path: clips_dir.clone(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();

    let mut by_episode: BTreeMap<String, Vec<ClipRecord>> = BTreeMap::new();
    let mut clip_episode: HashMap<String, String> = HashMap::new();
    for path in entries {
        let mut record: ClipRecord =
            serde_json::from_str(&read_to_string(&path)?).map_err(|source| BuildError::Json {
                path: path.clone(),
                source,
            })?;
        let srt_path = clips_dir.join(format!("{}.srt", record.clip_id));
        if record.subtitles.is_empty() && srt_path.exists() {
            record.subtitles =
                parse_srt(&read_to_string(&srt_path)?).map_err(|source| BuildError::Srt {
                    path: srt_path,
                    source,
                })?;
        }
        let ep = episode_id_of(&record)?;
        clip_episode.insert(record.clip_id.clone(), ep.clone());
        by_episode.entry(ep).or_default().push(record);
    }

    let mut qas: HashMap<String, Vec<QaRecord>> = HashMap::new();
    for qa in read_jsonl::<QaRecord>(&dir.join("qa.jsonl"))? {
        let ep = clip_episode
            .get(&qa.vid_name)
            .ok_or_else(|| BuildError::DanglingGoldClip {
                question_id: qa.qid.clone(),
                clip_id: qa.vid_name.clone(),
            })?;
        qas.entry(ep.clone()).or_default().push(qa);
    }
    let mut boxes: HashMap<String, Vec<BoxRecord>> = HashMap::new();
    for b in read_jsonl::<BoxRecord>(&dir.join("boxes.jsonl"))? {
        let ep = clip_episode
            .get(&b.vid_name)
            .ok_or_else(|| BuildError::DanglingBoxClip(b.vid_name.clone()))?;
        boxes.entry(ep.clone()).or_default().push(b);
    }

    by_episode
        .into_iter()
        .map(|(ep, clips)| {
            build_episode(
                clips,
                qas.remove(&ep).unwrap_or_default(),
                boxes.remove(&ep).unwrap_or_default(),
            )
        })
        .collect()
}
