//! Synthetic episodes and matching scripted fixtures, for simulation runs
//! and metric calibration without any video or model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::scripted::{MasterPolicy, QuestionFixture, ScriptedFixture, VisionFact};
use crate::episode::{Clip, Episode, Question, SubtitleLine, NUM_CHOICES, SCHEMA_VERSION};

const SPEAKERS: [&str; 6] = ["Sheldon", "Leonard", "Penny", "Howard", "Raj", "Amy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_episodes: usize,
    pub clips_per_episode: usize,
    pub questions_per_episode: usize,
    pub clip_duration_s: f64,
    pub seed: u64,
    pub grounding_error_rate: f64,
    pub grounding_noise_radius: Option<usize>,
    /// Visual queries the policy master issues after grounding; every
    /// question then takes `vision_calls + 2` turns.
    pub vision_calls: usize,
    /// Caps the total question count; the last episode holds the remainder.
    #[serde(default)]
    pub total_questions: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_episodes: 10,
            clips_per_episode: 12,
            questions_per_episode: 20,
            clip_duration_s: 60.0,
            seed: 0,
            grounding_error_rate: 0.0,
            grounding_noise_radius: None,
            vision_calls: 1,
            total_questions: None,
        }
    }
}

impl SynthSpec {
    /// Enough episodes of `questions_per_episode` to hold `n` questions;
    /// the last episode may hold fewer.
    pub fn with_questions(mut self, n: usize) -> Self {
        self.n_episodes = n.div_ceil(self.questions_per_episode.max(1));
        self.total_questions = Some(n);
        self
    }
}

/// A synthetic dataset with its fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub episodes: Vec<Episode>,
    pub fixture: ScriptedFixture,
}

pub fn episode_id(e: usize) -> String {
    format!("s90e{:02}", e + 1)
}

pub fn clip_id(e: usize, i: usize) -> String {
    format!("{}_seg01_clip_{i:02}", episode_id(e))
}

fn synth_episode(e: usize, spec: &SynthSpec, n_questions: usize, rng: &mut ChaCha8Rng) -> Episode {
    let id = episode_id(e);
    let mut clips = Vec::with_capacity(spec.clips_per_episode);
    let mut subtitles = Vec::new();
    for i in 0..spec.clips_per_episode {
        let offset = spec.clip_duration_s * i as f64;
        let first = subtitles.len();
        let n_lines = rng.random_range(1..=3usize);
        let step = spec.clip_duration_s / (n_lines as f64 + 1.0);
        for k in 0..n_lines {
            let start = offset + step * k as f64 + 0.5;
            subtitles.push(SubtitleLine {
                start_s: start,
                end_s: start + step * 0.8,
                speaker: Some(SPEAKERS[rng.random_range(0..SPEAKERS.len())].to_string()),
                text: format!("Line {k} of clip {i}."),
            });
        }
        clips.push(Clip {
            clip_id: clip_id(e, i),
            index: i,
            duration_s: spec.clip_duration_s,
            offset_s: offset,
            subtitle_range: first..subtitles.len(),
            frame_refs: (0..4).map(|f| format!("frames/{}/{f:05}.jpg", clip_id(e, i))).collect(),
        });
    }
    let questions = (0..n_questions)
        .map(|j| {
            let gold_clip = rng.random_range(0..spec.clips_per_episode);
            Question {
                question_id: format!("{id}_q{j:03}"),
                episode_id: id.clone(),
                text: format!("What happens in scene {gold_clip}?"),
                choices: (0..NUM_CHOICES).map(|c| format!("option {c} for question {j}")).collect(),
                gold_index: rng.random_range(0..NUM_CHOICES),
                gold_clip_id: clip_id(e, gold_clip),
            }
        })
        .collect();
    Episode {
        schema_version: SCHEMA_VERSION,
        episode_id: id,
        clips,
        subtitles,
        questions,
        boxes: Vec::new(),
    }
}

/// Builds episodes plus a policy-driven fixture for every question.
///
/// The policy grounds, issues `spec.vision_calls` visual queries, and
/// answers correctly exactly when its last grounding hit the gold clip.
pub fn generate(spec: &SynthSpec) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec
        .total_questions
        .unwrap_or(spec.n_episodes * spec.questions_per_episode);
    let mut episodes = Vec::with_capacity(spec.n_episodes);
    let mut remaining = total;
    for e in 0..spec.n_episodes {
        let n = remaining.min(spec.questions_per_episode);
        remaining -= n;
        episodes.push(synth_episode(e, spec, n, &mut rng));
    }

    let mut fixture = ScriptedFixture::new(spec.seed);
    fixture.grounding_error_rate = spec.grounding_error_rate;
    fixture.grounding_noise_radius = spec.grounding_noise_radius;
    for q in episodes.iter().flat_map(|e| &e.questions) {
        let wrong = (q.gold_index + 1) % NUM_CHOICES;
        let labeled = q.labeled_choices();
        fixture.questions.insert(
            q.question_id.clone(),
            QuestionFixture {
                gold_clip_id: q.gold_clip_id.clone(),
                vision_facts: (1..=spec.vision_calls)
                    .map(|k| VisionFact {
                        trigger: format!("(read {k})"),
                        response: format!("({k}) Frame detail {k} for {}.", q.question_id),
                    })
                    .collect(),
                master_script: Vec::new(),
                grounding_script: Vec::new(),
                policy: Some(MasterPolicy {
                    vision_calls: spec.vision_calls,
                    answer: labeled[q.gold_index].clone(),
                    wrong_answer: labeled[wrong].clone(),
                }),
            },
        );
    }
    Synthetic { episodes, fixture }
}
