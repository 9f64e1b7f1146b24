//! Deterministic simulators driven by a fixture file.
//!
//! A fixture lists, per question, the gold clip, ordered vision facts, and
//! either a verbatim master script or a small reactive policy. Grounding
//! noise is drawn from a per-call RNG derived from `(rng_seed, question_id,
//! call_index)`, so results do not depend on scheduling or on how many other
//! questions ran before.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    BackendError, CallContext, ChatMessage, Clip, GroundingBackend, MasterBackend, Role,
    VisionBackend,
};
use crate::action::{parse_action, ActionKind};
use crate::episode::{Episode, Question};
use crate::orchestrator::{Dispatch, Trajectory};
use crate::protocol::{parse_grounding_injection, VISION_PREFIX};

/// Returned when no vision fact matches a query.
pub const NO_VISUAL_DETAIL: &str = "No relevant visual detail is visible in the localized clip.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionFact {
    /// Case-insensitive substring looked for in the query. Empty matches anything.
    pub trigger: String,
    pub response: String,
}

/// A reactive stand-in for a master model.
///
/// It grounds first, then issues `vision_calls` visual queries against the
/// grounded clip, then answers `answer` if the last grounding hit the gold
/// clip and `wrong_answer` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterPolicy {
    #[serde(default)]
    pub vision_calls: usize,
    pub answer: String,
    pub wrong_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionFixture {
    pub gold_clip_id: String,
    #[serde(default)]
    pub vision_facts: Vec<VisionFact>,
    /// Verbatim master turns; takes precedence over `policy`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub master_script: Vec<String>,
    /// Clip ids returned by successive grounding calls before falling back
    /// to the noisy gold draw. Used to replay recorded runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grounding_script: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<MasterPolicy>,
}

impl QuestionFixture {
    /// An entry that replays `trajectory` turn for turn: its master texts,
    /// its grounding results and its vision descriptions.
    pub fn replaying(trajectory: &Trajectory, gold_clip_id: impl Into<String>) -> Self {
        let mut master_script: Vec<String> =
            trajectory.turns.iter().map(|t| t.master_text.clone()).collect();
        if let Some(forced) = &trajectory.forced_answer {
            master_script.push(format!("<answer>{forced}</answer>"));
        }
        let vision_facts = trajectory
            .turns
            .iter()
            .filter(|t| t.dispatch == Dispatch::Vision)
            .filter_map(|t| {
                let query = t.action.as_ref()?.payload.clone();
                let response = t.injected.as_deref()?.strip_prefix(VISION_PREFIX)?.to_string();
                Some(VisionFact {
                    trigger: query,
                    response,
                })
            })
            .collect();
        QuestionFixture {
            gold_clip_id: gold_clip_id.into(),
            vision_facts,
            master_script,
            grounding_script: trajectory.grounded_clips.clone(),
            policy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFixture {
    /// Probability that a grounding call misses the gold clip.
    #[serde(default)]
    pub grounding_error_rate: f64,
    /// When set, misses land within this many clips of gold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding_noise_radius: Option<usize>,
    #[serde(default)]
    pub rng_seed: u64,
    pub questions: BTreeMap<String, QuestionFixture>,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("grounding_error_rate {0} is outside [0, 1]")]
    BadErrorRate(f64),
}

impl ScriptedFixture {
    pub fn new(rng_seed: u64) -> Self {
        ScriptedFixture {
            grounding_error_rate: 0.0,
            grounding_noise_radius: None,
            rng_seed,
            questions: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path).map_err(|source| FixtureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let fx: ScriptedFixture =
            serde_json::from_str(&text).map_err(|source| FixtureError::Json {
                path: path.display().to_string(),
                source,
            })?;
        if !(0.0..=1.0).contains(&fx.grounding_error_rate) {
            return Err(FixtureError::BadErrorRate(fx.grounding_error_rate));
        }
        Ok(fx)
    }

    pub fn save(&self, path: &Path) -> Result<(), FixtureError> {
        let mut text = serde_json::to_string_pretty(self).expect("fixture serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| FixtureError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn entry(&self, question_id: &str) -> Result<&QuestionFixture, BackendError> {
        self.questions
            .get(question_id)
            .ok_or_else(|| BackendError::UnknownQuestion(question_id.to_string()))
    }

    /// Soft checks: scripts that never answer, entries with no master.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (qid, q) in &self.questions {
            if q.master_script.is_empty() && q.policy.is_none() {
                out.push(format!("{qid}: no master_script and no policy"));
            }
            if let Some(last) = q.master_script.last() {
                if parse_action(last).map(|a| a.kind) != Some(ActionKind::Answer) {
                    out.push(format!("{qid}: master_script does not end with an <answer> turn"));
                }
            }
        }
        out
    }
}

fn call_rng(seed: u64, question_id: &str, call_index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((question_id.len() as u64).to_le_bytes());
    h.update(question_id.as_bytes());
    h.update((call_index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// The clip returned by the `call_index`-th grounding call for a question.
///
/// Gold with probability `1 − p`, otherwise a uniformly drawn non-gold clip
/// (restricted to the noise radius when one is set).
pub fn scripted_ground(
    fixture: &ScriptedFixture,
    question_id: &str,
    episode: &Episode,
    call_index: usize,
) -> Result<String, BackendError> {
    let entry = fixture.entry(question_id)?;
    if let Some(id) = entry.grounding_script.get(call_index) {
        return Ok(id.clone());
    }
    let mut rng = call_rng(fixture.rng_seed, question_id, call_index);
    let miss = rng.random::<f64>() < fixture.grounding_error_rate;
    let gold = episode.clip_index(&entry.gold_clip_id);
    if !miss {
        return Ok(entry.gold_clip_id.clone());
    }
    let candidates: Vec<&Clip> = episode
        .clips
        .iter()
        .enumerate()
        .filter(|&(i, _)| match (gold, fixture.grounding_noise_radius) {
            (Some(g), Some(r)) => i != g && i.abs_diff(g) <= r,
            (Some(g), None) => i != g,
            (None, _) => true,
        })
        .map(|(_, c)| c)
        .collect();
    if candidates.is_empty() {
        return Ok(entry.gold_clip_id.clone());
    }
    Ok(candidates[rng.random_range(0..candidates.len())].clip_id.clone())
}

/// The master turn for `turn_index`.
///
/// Scripts are replayed verbatim; past their end the final answer is
/// repeated as a bare `<answer>` (or the last turn verbatim if the script
/// never answers). Policies react to the transcript.
pub fn scripted_master(
    fixture: &ScriptedFixture,
    question_id: &str,
    turn_index: usize,
    messages: &[ChatMessage],
) -> Result<String, BackendError> {
    let entry = fixture.entry(question_id)?;
    if let Some(last) = entry.master_script.last() {
        if let Some(turn) = entry.master_script.get(turn_index) {
            return Ok(turn.clone());
        }
        return Ok(match parse_action(last) {
            Some(a) if a.kind == ActionKind::Answer => format!("<answer>{}</answer>", a.payload),
            _ => last.clone(),
        });
    }
    let policy = entry
        .policy
        .as_ref()
        .ok_or_else(|| BackendError::NoMasterScript(question_id.to_string()))?;
    Ok(policy_turn(policy, &entry.gold_clip_id, messages))
}

fn policy_turn(policy: &MasterPolicy, gold_clip_id: &str, messages: &[ChatMessage]) -> String {
    let feedback: Vec<&str> = messages
        .iter()
        .skip(2)
        .filter(|m| m.role == Role::User)
        .filter_map(ChatMessage::as_text)
        .collect();
    let last_grounding = feedback
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, t)| parse_grounding_injection(t).map(|id| (i, id)));
    let Some((at, clip_id)) = last_grounding else {
        return "<think>Nothing is localized yet; ground the question first.</think><request_grounding>"
            .to_string();
    };
    let reads = feedback[at + 1..]
        .iter()
        .filter(|t| t.starts_with(VISION_PREFIX))
        .count();
    if reads < policy.vision_calls {
        return format!(
            "<think>The subtitles are not enough; inspect the frames.</think><visual_query>describe the scene in {clip_id} (read {})</visual_query>",
            reads + 1
        );
    }
    let answer = if clip_id == gold_clip_id {
        &policy.answer
    } else {
        &policy.wrong_answer
    };
    format!("<think>Evidence gathered.</think><answer>{answer}</answer>")
}

/// First unconsumed fact whose trigger occurs in `query`, case-insensitively.
fn match_fact(facts: &[VisionFact], consumed: &mut [bool], query: &str) -> Option<usize> {
    let q = query.to_lowercase();
    let hit = facts
        .iter()
        .enumerate()
        .position(|(i, f)| !consumed[i] && q.contains(&f.trigger.to_lowercase()))?;
    consumed[hit] = true;
    Some(hit)
}

/// Serves all three roles from one fixture.
///
/// Vision facts are consumed per question; the cursor resets whenever a
/// trajectory makes its first vision call (`call_index == 0`).
pub struct ScriptedBackend {
    fixture: ScriptedFixture,
    consumed: Mutex<HashMap<String, Vec<bool>>>,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        ScriptedBackend {
            fixture,
            consumed: Mutex::new(HashMap::new()),
        }
    }

    pub fn fixture(&self) -> &ScriptedFixture {
        &self.fixture
    }

    /// The vision reply for one call; see [`ScriptedBackend`].
    pub fn scripted_describe(
        &self,
        question_id: &str,
        call_index: usize,
        query: &str,
    ) -> Result<String, BackendError> {
        let entry = self.fixture.entry(question_id)?;
        let mut state = self.consumed.lock().expect("vision cursor lock");
        let consumed = state
            .entry(question_id.to_string())
            .or_insert_with(|| vec![false; entry.vision_facts.len()]);
        if call_index == 0 {
            consumed.iter_mut().for_each(|c| *c = false);
        }
        Ok(match match_fact(&entry.vision_facts, consumed, query) {
            Some(i) => entry.vision_facts[i].response.clone(),
            None => NO_VISUAL_DETAIL.to_string(),
        })
    }
}

impl MasterBackend for ScriptedBackend {
    fn generate(
        &self,
        ctx: &CallContext<'_>,
        messages: &[ChatMessage],
        _stop_markers: &[String],
    ) -> Result<String, BackendError> {
        scripted_master(&self.fixture, ctx.question_id, ctx.step, messages)
    }
}

impl GroundingBackend for ScriptedBackend {
    fn ground(
        &self,
        ctx: &CallContext<'_>,
        episode: &Episode,
        _question: &Question,
    ) -> Result<String, BackendError> {
        scripted_ground(&self.fixture, ctx.question_id, episode, ctx.call_index)
    }
}

impl VisionBackend for ScriptedBackend {
    fn describe(
        &self,
        ctx: &CallContext<'_>,
        query: &str,
        _clip: &Clip,
        _window_clips: &[Clip],
    ) -> Result<String, BackendError> {
        self.scripted_describe(ctx.question_id, ctx.call_index, query)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::tests::uniform_episode;

    fn fixture_with(p: f64, qid: &str, gold: &str) -> ScriptedFixture {
        let mut fx = ScriptedFixture::new(7);
        fx.grounding_error_rate = p;
        fx.questions.insert(
            qid.into(),
            QuestionFixture {
                gold_clip_id: gold.into(),
                vision_facts: vec![],
                master_script: vec![],
                grounding_script: vec![],
                policy: None,
            },
        );
        fx
    }

    #[test]
    fn noise_off_always_gold() {
        let ep = uniform_episode(5);
        let fx = fixture_with(0.0, "q", "s01e01_seg01_clip_03");
        for i in 0..200 {
            assert_eq!(
                scripted_ground(&fx, "q", &ep, i).unwrap(),
                "s01e01_seg01_clip_03"
            );
        }
    }

    #[test]
    fn forced_error_picks_the_other_clip() {
        let ep = uniform_episode(2);
        let fx = fixture_with(1.0, "q", "s01e01_seg01_clip_00");
        for i in 0..200 {
            assert_eq!(
                scripted_ground(&fx, "q", &ep, i).unwrap(),
                "s01e01_seg01_clip_01"
            );
        }
    }

    #[test]
    fn noise_radius_limits_misses() {
        let ep = uniform_episode(10);
        let mut fx = fixture_with(1.0, "q", "s01e01_seg01_clip_05");
        fx.grounding_noise_radius = Some(1);
        for i in 0..200 {
            let c = scripted_ground(&fx, "q", &ep, i).unwrap();
            assert!(c == "s01e01_seg01_clip_04" || c == "s01e01_seg01_clip_06", "{c}");
        }
    }

    #[test]
    fn unknown_question() {
        let ep = uniform_episode(2);
        let fx = fixture_with(0.0, "q", "x");
        assert_eq!(
            scripted_ground(&fx, "nope", &ep, 0),
            Err(BackendError::UnknownQuestion("nope".into()))
        );
    }

    #[test]
    fn vision_facts_walk_in_order() {
        let mut fx = fixture_with(0.0, "q", "c");
        fx.questions.get_mut("q").unwrap().vision_facts = vec![
            VisionFact {
                trigger: "scene layout".into(),
                response: "(1) layout".into(),
            },
            VisionFact {
                trigger: "which side".into(),
                response: "(2) left".into(),
            },
        ];
        let b = ScriptedBackend::new(fx);
        assert_eq!(b.scripted_describe("q", 0, "Scene Layout please").unwrap(), "(1) layout");
        assert_eq!(b.scripted_describe("q", 1, "scene layout again").unwrap(), NO_VISUAL_DETAIL);
        assert_eq!(b.scripted_describe("q", 2, "which side is it").unwrap(), "(2) left");
        // a new trajectory starts over
        assert_eq!(b.scripted_describe("q", 0, "scene layout").unwrap(), "(1) layout");
    }

    #[test]
    fn script_tail_repeats_final_answer() {
        let mut fx = fixture_with(0.0, "q", "c");
        fx.questions.get_mut("q").unwrap().master_script = vec![
            "<request_grounding>".into(),
            "<think>done</think><answer>a3: A Bus Stop</answer>".into(),
        ];
        assert_eq!(scripted_master(&fx, "q", 0, &[]).unwrap(), "<request_grounding>");
        assert_eq!(
            scripted_master(&fx, "q", 5, &[]).unwrap(),
            "<answer>a3: A Bus Stop</answer>"
        );
        assert!(fx.warnings().is_empty());
    }

    #[test]
    fn prose_script_tail_repeats_verbatim() {
        let mut fx = fixture_with(0.0, "q", "c");
        fx.questions.get_mut("q").unwrap().master_script = vec!["hmm".into()];
        assert_eq!(scripted_master(&fx, "q", 3, &[]).unwrap(), "hmm");
        assert_eq!(fx.warnings().len(), 1);
    }

    #[test]
    fn policy_reacts_to_feedback() {
        let mut fx = fixture_with(0.0, "q", "c1");
        fx.questions.get_mut("q").unwrap().policy = Some(MasterPolicy {
            vision_calls: 1,
            answer: "a2: right".into(),
            wrong_answer: "a0: wrong".into(),
        });
        let mut msgs = vec![ChatMessage::system("s"), ChatMessage::user("u")];
        let t0 = scripted_master(&fx, "q", 0, &msgs).unwrap();
        assert!(t0.ends_with("<request_grounding>"));
        msgs.push(ChatMessage::assistant(t0));
        msgs.push(ChatMessage::user("<c1>\nline"));
        let t1 = scripted_master(&fx, "q", 1, &msgs).unwrap();
        assert!(t1.contains("<visual_query>"));
        msgs.push(ChatMessage::assistant(t1));
        msgs.push(ChatMessage::user(format!("{VISION_PREFIX}a bench")));
        let t2 = scripted_master(&fx, "q", 2, &msgs).unwrap();
        assert!(t2.ends_with("<answer>a2: right</answer>"));
        msgs.push(ChatMessage::assistant(t2));
        msgs.push(ChatMessage::user("<c0>\nline"));
        msgs.push(ChatMessage::assistant("x"));
        msgs.push(ChatMessage::user(format!("{VISION_PREFIX}a bench")));
        assert!(scripted_master(&fx, "q", 4, &msgs)
            .unwrap()
            .ends_with("<answer>a0: wrong</answer>"));
    }
}
