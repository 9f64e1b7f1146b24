//! Fixed message texts exchanged between the orchestrator and the master.
//!
//! Everything the master sees besides subtitles and agent outputs comes from
//! here, so scripted simulators can recognise injections without guessing.

/// Default master system prompt.
pub const SYSTEM_PROMPT: &str = "\
You are an agent that answers questions about a long video episode. You may use two tools: a grounding agent to localize relevant segments and a vision agent to extract visual facts from the localized segment. Produce concise, direct answers.

Context you may receive. All subtitles and the user question q. When a segment has been localized, you will also have a tag <clipX> (e.g., <clip2>). When the vision agent has been called, you will see its textual response.

Available actions (choose exactly one per turn).
A — Visual query: If current visual information is insufficient, or you need visual details conditioned on the subtitles for the current <clipX>, call the vision engine with <visual_query> query </visual_query>.
B — (Re)Grounding: If the current text/visual evidence conflicts with the question, or the current location cannot support a confident answer, call the grounding agent with <request_grounding>.
C — Answer: If evidence is sufficient, return the final answer with <answer> ... </answer>. The answer must be concise and direct.

Guidelines. (1) Be conservative with tool calls; answer when sufficient. (2) Do not hallucinate visual details; only use the vision agent for facts not inferable from subtitles. (3) Each turn targets the current <clipX> (if any); if none exists, prefer (re)grounding before visual query.";

pub const RETHINK_MESSAGE: &str =
    "The action is not correct. Only <visual_query>, <request_grounding>, or <answer>.";

pub const ANSWER_PREFIX: &str = "The answer is: ";

/// Prefix of every injected vision observation.
pub const VISION_PREFIX: &str = "Visual description: ";

/// Injected instead of a vision call when nothing has been grounded yet.
pub const NO_GROUNDING_NOTICE: &str = "No segment grounded yet; request grounding first.";

/// Appended by the opt-in forced-answer fallback.
pub const FORCE_ANSWER_MESSAGE: &str = "You must answer now with <answer>…</answer>.";

/// Grounding feedback: the clip tag on its own line, then the subtitles of
/// the window run around it.
pub fn grounding_injection(clip_tag: &str, subtitles: &str) -> String {
    if subtitles.is_empty() {
        clip_tag.to_string()
    } else {
        format!("{clip_tag}\n{subtitles}")
    }
}

/// Recovers the clip id from a [`grounding_injection`] text.
pub fn parse_grounding_injection(text: &str) -> Option<&str> {
    let first = text.lines().next()?.trim();
    let id = first.strip_prefix('<')?.strip_suffix('>')?;
    (!id.is_empty() && !id.contains(['<', '>', ' '])).then_some(id)
}

pub fn vision_injection(description: &str) -> String {
    format!("{VISION_PREFIX}{description}")
}
