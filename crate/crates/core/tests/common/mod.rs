//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde_json::{json, Value};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

// ---------------------------------------------------------------- grammar

/// A turn built from whole protocol tokens and tag-free text.
#[derive(Debug, Clone, PartialEq)]
pub enum Piece {
    Tok(&'static str),
    Text(&'static str),
}

pub const TOKENS: [&str; 8] = [
    "<think>",
    "</think>",
    "<visual_query>",
    "</visual_query>",
    "<request_grounding>",
    "</request_grounding>",
    "<answer>",
    "</answer>",
];

/// Filler never contains `>`, so it can neither form a token on its own
/// nor combine with a neighbouring token into a different one.
pub const FILLER: [&str; 14] = [
    "",
    " ",
    "\n",
    "\t ",
    "a3: A Bus Stop",
    "left",
    "<ans",
    "</",
    "x < y",
    "answer",
    "<think",
    "é — ü",
    "request_grounding",
    "  spaced  ",
];

pub fn render(pieces: &[Piece]) -> String {
    pieces
        .iter()
        .map(|p| match p {
            Piece::Tok(t) | Piece::Text(t) => *t,
        })
        .collect()
}

fn closer_of(open: &str) -> Option<&'static str> {
    match open {
        "<visual_query>" => Some("</visual_query>"),
        "<request_grounding>" => Some("</request_grounding>"),
        "<answer>" => Some("</answer>"),
        _ => None,
    }
}

/// Validity by literal shape matching over the piece sequence.
///
/// After merging adjacent text and dropping blank text at the edges, a
/// valid turn is an optional leading `<think> … </think>` (anything but a
/// `</think>` inside) followed by exactly one of:
/// `[<request_grounding>]`, `[open, close]` for request_grounding, or
/// `[open, text, close]` with non-blank text unless the tag is
/// request_grounding.
pub fn oracle_valid(pieces: &[Piece]) -> bool {
    #[derive(Debug, PartialEq)]
    enum M {
        Tok(&'static str),
        Text(String),
    }
    let mut merged: Vec<M> = Vec::new();
    for p in pieces {
        match p {
            Piece::Tok(t) => merged.push(M::Tok(t)),
            Piece::Text(s) => match merged.last_mut() {
                Some(M::Text(prev)) => prev.push_str(s),
                _ => merged.push(M::Text(s.to_string())),
            },
        }
    }
    let blank = |m: &M| matches!(m, M::Text(s) if s.trim().is_empty());
    let mut rest: &[M] = &merged;
    while rest.first().is_some_and(blank) {
        rest = &rest[1..];
    }
    if rest.first() == Some(&M::Tok("<think>")) {
        match rest.iter().position(|m| *m == M::Tok("</think>")) {
            Some(i) => rest = &rest[i + 1..],
            None => return false,
        }
    }
    while rest.first().is_some_and(blank) {
        rest = &rest[1..];
    }
    while rest.last().is_some_and(blank) {
        rest = &rest[..rest.len() - 1];
    }
    match rest {
        [M::Tok("<request_grounding>")] => true,
        [M::Tok(o), M::Tok(c)] => *o == "<request_grounding>" && *c == "</request_grounding>",
        [M::Tok(o), M::Text(t), M::Tok(c)] => match closer_of(o) {
            Some(close) if close == *c => *o == "<request_grounding>" || !t.trim().is_empty(),
            _ => false,
        },
        _ => false,
    }
}

fn random_text<R: Rng>(rng: &mut R) -> Piece {
    Piece::Text(FILLER[rng.random_range(0..FILLER.len())])
}

/// Random turns, half of them built around a valid skeleton and then
/// possibly perturbed, so both verdicts are well represented.
pub fn random_pieces<R: Rng>(rng: &mut R) -> Vec<Piece> {
    if rng.random_bool(0.5) {
        let n = rng.random_range(0..=8);
        return (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    Piece::Tok(TOKENS[rng.random_range(0..TOKENS.len())])
                } else {
                    random_text(rng)
                }
            })
            .collect();
    }
    let mut v = Vec::new();
    if rng.random_bool(0.3) {
        v.push(random_text(rng));
    }
    if rng.random_bool(0.5) {
        v.push(Piece::Tok("<think>"));
        for _ in 0..rng.random_range(0..3) {
            if rng.random_bool(0.3) {
                v.push(Piece::Tok(TOKENS[rng.random_range(2..TOKENS.len())]));
            } else {
                v.push(random_text(rng));
            }
        }
        v.push(Piece::Tok("</think>"));
    }
    let open = [2usize, 4, 6][rng.random_range(0..3)];
    v.push(Piece::Tok(TOKENS[open]));
    if !(open == 4 && rng.random_bool(0.4)) {
        v.push(random_text(rng));
        v.push(Piece::Tok(TOKENS[open + 1]));
    }
    if rng.random_bool(0.25) {
        v.push(random_text(rng));
    }
    match rng.random_range(0..6) {
        0 => {
            let i = rng.random_range(0..v.len());
            v.remove(i);
        }
        1 => {
            let i = rng.random_range(0..=v.len());
            v.insert(i, Piece::Tok(TOKENS[rng.random_range(0..TOKENS.len())]));
        }
        _ => {}
    }
    v
}

// ------------------------------------------------------------ HTTP stub

type Handler = dyn Fn(&Value) -> (u16, String) + Send + Sync;

/// A minimal HTTP/1.1 server answering JSON POSTs through a handler.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Value>>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let handler: Arc<Handler> = Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let Some(body) = read_request(&mut stream) else {
                    continue;
                };
                let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                let (status, reply) = handler(&value);
                log.lock().unwrap().push(value);
                let head = format!(
                    "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    reply.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(reply.as_bytes());
                let _ = stream.flush();
            }
        });
        StubServer { url, requests }
    }

    /// Replies from a fixed queue, repeating the last entry when it runs dry.
    pub fn sequence(replies: Vec<(u16, String)>) -> Self {
        let queue = Mutex::new(VecDeque::from(replies));
        Self::start(move |_| {
            let mut q = queue.lock().unwrap();
            if q.len() > 1 {
                q.pop_front().unwrap()
            } else {
                q.front().cloned().unwrap_or((500, "{}".into()))
            }
        })
    }

    pub fn n_requests(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn read_request(stream: &mut std::net::TcpStream) -> Option<Vec<u8>> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut content_length = 0usize;
    let mut chunked = false;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            content_length = v.trim().parse().ok()?;
        }
        if lower.starts_with("transfer-encoding:") && lower.contains("chunked") {
            chunked = true;
        }
    }
    let mut body = Vec::new();
    if chunked {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size).ok()?;
            let n = usize::from_str_radix(size.trim(), 16).ok()?;
            let mut chunk = vec![0u8; n + 2];
            reader.read_exact(&mut chunk).ok()?;
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    } else {
        body.resize(content_length, 0);
        reader.read_exact(&mut body).ok()?;
    }
    Some(body)
}

/// An OpenAI-style chat completion body.
pub fn chat_reply(text: &str, finish_reason: &str) -> String {
    json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": finish_reason,
        }]
    })
    .to_string()
}
