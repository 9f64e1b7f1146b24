//! The action-token protocol spoken by the master agent.
//!
//! Each master turn is expected to be an optional `<think>…</think>` block
//! followed by exactly one of three action tags:
//!
//! ```text
//! <visual_query>query</visual_query>
//! <request_grounding>                      (bare, or paired with a closing tag)
//! <answer>text</answer>
//! ```
//!
//! Tag matching is exact and case-sensitive. There is no attribute syntax and
//! no nesting: the payload of a paired tag runs up to the next protocol token,
//! and that token must be the matching closer.

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const DEFAULT_EOS_MARKER: &str = "<eos>";

/// One of the three structured actions a master turn may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    VisualQuery,
    RequestGrounding,
    Answer,
}

impl ActionKind {
    pub const ALL: [ActionKind; 3] = [
        ActionKind::VisualQuery,
        ActionKind::RequestGrounding,
        ActionKind::Answer,
    ];

    pub fn open_tag(self) -> &'static str {
        match self {
            ActionKind::VisualQuery => "<visual_query>",
            ActionKind::RequestGrounding => "<request_grounding>",
            ActionKind::Answer => "<answer>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            ActionKind::VisualQuery => "</visual_query>",
            ActionKind::RequestGrounding => "</request_grounding>",
            ActionKind::Answer => "</answer>",
        }
    }

    /// Whether a well-formed action of this kind must carry a non-blank payload.
    pub fn requires_payload(self) -> bool {
        !matches!(self, ActionKind::RequestGrounding)
    }
}

/// A successfully extracted action.
///
/// `raw_span` is a byte range into the parsed text running from the opening
/// tag through its closing tag (or just the opening tag for a bare
/// `<request_grounding>`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAction {
    pub kind: ActionKind,
    pub payload: String,
    pub raw_span: Range<usize>,
    pub preceding_think: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    NoTag,
    MultipleTags,
    UnclosedTag,
    ExtraneousText,
    EmptyPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralVerdict {
    pub valid: bool,
    pub violation: Option<Violation>,
}

impl StructuralVerdict {
    pub const VALID: StructuralVerdict = StructuralVerdict {
        valid: true,
        violation: None,
    };

    pub fn invalid(violation: Violation) -> Self {
        StructuralVerdict {
            valid: false,
            violation: Some(violation),
        }
    }

    /// The per-step format reward: 1 for a valid turn, 0 otherwise.
    pub fn as_reward(self) -> u8 {
        u8::from(self.valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    ThinkOpen,
    ThinkClose,
    Open(ActionKind),
    Close(ActionKind),
}

impl Token {
    const ALL: [Token; 8] = [
        Token::ThinkOpen,
        Token::ThinkClose,
        Token::Open(ActionKind::VisualQuery),
        Token::Close(ActionKind::VisualQuery),
        Token::Open(ActionKind::RequestGrounding),
        Token::Close(ActionKind::RequestGrounding),
        Token::Open(ActionKind::Answer),
        Token::Close(ActionKind::Answer),
    ];

    fn as_str(self) -> &'static str {
        match self {
            Token::ThinkOpen => THINK_OPEN,
            Token::ThinkClose => THINK_CLOSE,
            Token::Open(k) => k.open_tag(),
            Token::Close(k) => k.close_tag(),
        }
    }
}

/// Earliest protocol token at or after `from`.
fn next_token(text: &str, from: usize) -> Option<(usize, Token)> {
    let hay = &text[from..];
    Token::ALL
        .iter()
        .filter_map(|&tok| hay.find(tok.as_str()).map(|i| (from + i, tok)))
        .min_by_key(|&(pos, _)| pos)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Item {
    Think {
        content: Range<usize>,
    },
    UnclosedThink,
    Element {
        kind: ActionKind,
        payload: Range<usize>,
        span: Range<usize>,
    },
    UnclosedElement,
    Text,
}

/// Splits a turn into top-level items. Whitespace-only text is dropped.
fn top_level_items(text: &str) -> Vec<Item> {
    let mut items = Vec::new();
    let mut pos = 0;
    let push_text = |items: &mut Vec<Item>, range: Range<usize>| {
        if !text[range].trim().is_empty() {
            items.push(Item::Text);
        }
    };
    while let Some((at, tok)) = next_token(text, pos) {
        push_text(&mut items, pos..at);
        let after = at + tok.as_str().len();
        pos = after;
        match tok {
            Token::ThinkOpen => match text[after..].find(THINK_CLOSE) {
                Some(i) => {
                    items.push(Item::Think {
                        content: after..after + i,
                    });
                    pos = after + i + THINK_CLOSE.len();
                }
                None => items.push(Item::UnclosedThink),
            },
            Token::Open(kind) => match next_token(text, after) {
                Some((close_at, Token::Close(k))) if k == kind => {
                    let end = close_at + kind.close_tag().len();
                    items.push(Item::Element {
                        kind,
                        payload: after..close_at,
                        span: at..end,
                    });
                    pos = end;
                }
                _ if kind == ActionKind::RequestGrounding => items.push(Item::Element {
                    kind,
                    payload: after..after,
                    span: at..after,
                }),
                _ => items.push(Item::UnclosedElement),
            },
            // A closer with no opener is just stray text.
            Token::ThinkClose | Token::Close(_) => items.push(Item::Text),
        }
    }
    push_text(&mut items, pos..text.len());
    items
}

fn blank(s: &str) -> bool {
    s.trim().is_empty()
}

/// Judges whether a turn is exactly one well-closed action, optionally
/// preceded by a single `<think>` block.
pub fn structural_validity(turn_text: &str) -> StructuralVerdict {
    let items = top_level_items(turn_text);
    if items
        .iter()
        .any(|i| matches!(i, Item::UnclosedThink | Item::UnclosedElement))
    {
        return StructuralVerdict::invalid(Violation::UnclosedTag);
    }
    let elements: Vec<(usize, &Item)> = items
        .iter()
        .enumerate()
        .filter(|(_, i)| matches!(i, Item::Element { .. }))
        .collect();
    let (element_index, element) = match elements.as_slice() {
        [] => return StructuralVerdict::invalid(Violation::NoTag),
        [single] => *single,
        _ => return StructuralVerdict::invalid(Violation::MultipleTags),
    };
    let extraneous = items.iter().enumerate().any(|(i, item)| match item {
        Item::Think { .. } => !(i == 0 && element_index == 1),
        Item::Element { .. } => false,
        _ => true,
    });
    if extraneous {
        return StructuralVerdict::invalid(Violation::ExtraneousText);
    }
    if let Item::Element { kind, payload, .. } = element {
        if kind.requires_payload() && blank(&turn_text[payload.clone()]) {
            return StructuralVerdict::invalid(Violation::EmptyPayload);
        }
    }
    StructuralVerdict::VALID
}

/// Extracts the first well-formed top-level action, if any.
///
/// Text around the action is tolerated here; judging it is the job of
/// [`structural_validity`].
pub fn parse_action(turn_text: &str) -> Option<ParsedAction> {
    let mut last_think: Option<&Range<usize>> = None;
    for item in top_level_items(turn_text).iter() {
        match item {
            Item::Think { content } => last_think = Some(content),
            Item::Element {
                kind,
                payload,
                span,
            } => {
                let payload = &turn_text[payload.clone()];
                if kind.requires_payload() && blank(payload) {
                    continue;
                }
                return Some(ParsedAction {
                    kind: *kind,
                    payload: if kind.requires_payload() {
                        payload.to_string()
                    } else {
                        String::new()
                    },
                    raw_span: span.clone(),
                    preceding_think: last_think.map(|r| turn_text[r.clone()].to_string()),
                });
            }
            _ => {}
        }
    }
    None
}

/// The four markers that end a master generation turn.
pub fn stop_markers(eos_marker: &str) -> Vec<String> {
    ActionKind::ALL
        .iter()
        .map(|k| k.close_tag().to_string())
        .chain(std::iter::once(eos_marker.to_string()))
        .collect()
}

/// Byte position just past the earliest stop marker, or `None`.
pub fn scan_stop(generated_text: &str, eos_marker: &str) -> Option<usize> {
    ActionKind::ALL
        .iter()
        .map(|k| k.close_tag())
        .chain(std::iter::once(eos_marker).filter(|m| !m.is_empty()))
        .filter_map(|m| generated_text.find(m).map(|start| (start, start + m.len())))
        .min()
        .map(|(_, end)| end)
}

/// Cuts `generated_text` right after its first stop marker.
pub fn truncate_at_stop<'a>(generated_text: &'a str, eos_marker: &str) -> &'a str {
    match scan_stop(generated_text, eos_marker) {
        Some(end) => &generated_text[..end],
        None => generated_text,
    }
}

/// A normalized answer string plus its leading choice label, when present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub text: String,
    pub label: Option<String>,
}

fn is_trim_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '…' | '“' | '”' | '‘' | '’' | '—' | '–' | '«' | '»' | '¿' | '¡' | '·'
        )
}

/// Lowercases, trims surrounding whitespace and punctuation, collapses
/// internal whitespace, and pulls out a leading `aN` choice label.
pub fn normalize_answer(raw: &str) -> NormalizedAnswer {
    let trimmed = raw.trim_matches(|c: char| c.is_whitespace() || is_trim_punct(c));
    let text = trimmed
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    let label = choice_label(&text);
    NormalizedAnswer { text, label }
}

/// `a3`, `a3:` and `a3 …` all yield `a3`; `a35` and `apple` yield nothing.
fn choice_label(normalized: &str) -> Option<String> {
    let mut chars = normalized.chars();
    let (Some('a'), Some(d)) = (chars.next(), chars.next()) else {
        return None;
    };
    if !d.is_ascii_digit() {
        return None;
    }
    match chars.next() {
        None | Some(':') => Some(format!("a{d}")),
        Some(c) if c.is_whitespace() => Some(format!("a{d}")),
        _ => None,
    }
}
