//! Minimal SRT reader for clip-local subtitle files.

use thiserror::Error;

use super::builder::LocalSubtitle;

#[derive(Debug, Error, PartialEq)]
pub enum SrtError {
    #[error("line {line}: malformed timing `{text}`")]
    BadTiming { line: usize, text: String },
}

fn parse_timestamp(ts: &str) -> Option<f64> {
    let ts = ts.trim();
    let (hms, millis) = ts.split_once([',', '.'])?;
    let mut parts = hms.split(':');
    let h: u64 = parts.next()?.trim().parse().ok()?;
    let m: u64 = parts.next()?.trim().parse().ok()?;
    let s: u64 = parts.next()?.trim().parse().ok()?;
    if parts.next().is_some() || m >= 60 || s >= 60 {
        return None;
    }
    let ms: u64 = millis.trim().parse().ok()?;
    Some((h * 3600 + m * 60 + s) as f64 + ms as f64 / 1000.0)
}

/// Splits a `Name: text` line on its first colon.
///
/// The prefix only counts as a speaker when it looks like a name: short,
/// at most four words, no sentence punctuation and no digits.
/// TVQA's `(Name:)` wrapping is accepted too.
pub fn split_speaker(line: &str) -> (Option<String>, String) {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix('(') {
        if let Some((name, text)) = rest.split_once(":)") {
            if looks_like_name(name) {
                return (Some(name.trim().to_string()), text.trim().to_string());
            }
        }
    }
    if let Some((name, text)) = line.split_once(':') {
        if looks_like_name(name) && !text.trim().is_empty() {
            return (Some(name.trim().to_string()), text.trim().to_string());
        }
    }
    (None, line.to_string())
}

fn looks_like_name(s: &str) -> bool {
    let s = s.trim();
    !s.is_empty()
        && s.chars().count() <= 40
        && s.split_whitespace().count() <= 4
        && !s.contains(|c: char| c.is_ascii_digit())
        && !s.contains(['.', '?', '!', ',', '"', '(', ')'])
}

/// Parses SRT text into clip-local subtitle lines.
///
/// Cue numbers are optional; multi-line cue text is joined with spaces.
pub fn parse_srt(text: &str) -> Result<Vec<LocalSubtitle>, SrtError> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((lineno, line)) = lines.next() {
        let line = line.trim_start_matches('\u{feff}').trim();
        if line.is_empty() {
            continue;
        }
        let (timing_line, timing) = if line.contains("-->") {
            (lineno, line)
        } else {
            // cue number; the timing follows
            match lines.next() {
                Some((n, t)) => (n, t.trim()),
                None => break,
            }
        };
        let (start, end) = timing
            .split_once("-->")
            .and_then(|(a, b)| {
                // trailing position hints such as `X1:…` are ignored
                let b = b.split_whitespace().next().unwrap_or("");
                Some((parse_timestamp(a)?, parse_timestamp(b)?))
            })
            .ok_or_else(|| SrtError::BadTiming {
                line: timing_line + 1,
                text: timing.to_string(),
            })?;
        let mut body = Vec::new();
        while let Some((_, l)) = lines.peek() {
            if l.trim().is_empty() {
                break;
            }
            body.push(l.trim().to_string());
            lines.next();
        }
        let (speaker, text) = split_speaker(&body.join(" "));
        out.push(LocalSubtitle {
            start_s: start,
            end_s: end,
            speaker,
            text,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_blocks() {
        let srt = "1\n00:00:01,000 --> 00:00:03,500\nSheldon: Two peas\nin a pod.\n\n2\n00:00:04,000 --> 00:00:05,250\n(Mrs Cooper:) Here. Thank you.\n";
        let subs = parse_srt(srt).unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].start_s, 1.0);
        assert_eq!(subs[0].end_s, 3.5);
        assert_eq!(subs[0].speaker.as_deref(), Some("Sheldon"));
        assert_eq!(subs[0].text, "Two peas in a pod.");
        assert_eq!(subs[1].speaker.as_deref(), Some("Mrs Cooper"));
        assert_eq!(subs[1].end_s, 5.25);
    }

    #[test]
    fn speaker_heuristic() {
        assert_eq!(split_speaker("Leonard: Hi").0.as_deref(), Some("Leonard"));
        assert_eq!(split_speaker("Meet me at 10:30").0, None);
        assert_eq!(split_speaker("Well, here's the thing: no").0, None);
        assert_eq!(split_speaker("No speaker here").1, "No speaker here");
    }

    #[test]
    fn bad_timing_is_an_error() {
        let err = parse_srt("1\n00:00:xx --> 00:00:02,000\nhi\n").unwrap_err();
        assert!(matches!(err, SrtError::BadTiming { line: 2, .. }));
    }

    #[test]
    fn cue_numbers_optional() {
        let subs = parse_srt("00:01:00.000 --> 00:01:02.000\nhello\n").unwrap();
        assert_eq!(subs[0].start_s, 60.0);
        assert_eq!(subs[0].speaker, None);
    }
}
