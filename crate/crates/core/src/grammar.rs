//! Canonical line-oriented text form of a [`Feedback`] record.
//!
//! ```text
//! appropriate: false
//! positive_areas: Empathy, Validation
//! goal_alignment: <text>
//! areas_for_improvement: Questions
//! alternative: <text>
//! ```
//!
//! Lines appear in exactly this order and each is optional except the first.
//! Text values escape `\` as `\\`, newline as `\n` and carriage return as
//! `\r`, so every field occupies one line. Category lists are `, `-separated
//! canonical names in enum order. Every line, including the last, ends in
//! `\n`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{ensure_valid, CategorySet, Feedback, InvalidFeedback, SkillCategory};

pub const APPROPRIATE: &str = "appropriate";
pub const POSITIVE: &str = "positive_areas";
pub const GOAL: &str = "goal_alignment";
pub const AREAS: &str = "areas_for_improvement";
pub const ALTERNATIVE: &str = "alternative";

const OPTIONAL_ORDER: [&str; 4] = [POSITIVE, GOAL, AREAS, ALTERNATIVE];

/// Human-readable grammar description, embedded in model prompts.
pub const FORMAT_DESCRIPTION: &str = "\
Answer using exactly these labeled lines, in this order, one field per line:
appropriate: true|false
positive_areas: <comma-separated categories>   (optional)
goal_alignment: <text>                         (only when appropriate is false)
areas_for_improvement: <comma-separated categories> (only when appropriate is false)
alternative: <text>                            (only when appropriate is false)
Categories: Reflections, Questions, Suggestions, Validation, Self-disclosure, Empathy, Professionalism, Structure.
Write each text on a single line; use \\n for a line break.
";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: expected {expected}")]
pub struct ParseError {
    pub offset: usize,
    pub expected: String,
}

impl ParseError {
    fn new(offset: usize, expected: impl Into<String>) -> Self {
        ParseError { offset, expected: expected.into() }
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(text: &str, offset: usize) -> Result<String, ParseError> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.char_indices();
    while let Some((i, ch)) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some((_, '\\')) => out.push('\\'),
            Some((_, 'n')) => out.push('\n'),
            Some((_, 'r')) => out.push('\r'),
            _ => return Err(ParseError::new(offset + i, "escape sequence \\\\, \\n or \\r")),
        }
    }
    Ok(out)
}

fn join_categories(set: &CategorySet) -> String {
    set.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ")
}

/// Renders a valid record in canonical form.
pub fn serialize_feedback(fb: &Feedback) -> Result<String, InvalidFeedback> {
    ensure_valid(fb)?;
    let mut out = format!("{APPROPRIATE}: {}\n", fb.appropriate);
    if let Some(pos) = &fb.positive_areas {
        out.push_str(&format!("{POSITIVE}: {}\n", join_categories(pos)));
    }
    if let Some(goal) = &fb.goal_alignment {
        out.push_str(&format!("{GOAL}: {}\n", escape(goal)));
    }
    if let Some(areas) = &fb.areas_for_improvement {
        out.push_str(&format!("{AREAS}: {}\n", join_categories(areas)));
    }
    if let Some(alt) = &fb.alternative {
        out.push_str(&format!("{ALTERNATIVE}: {}\n", escape(alt)));
    }
    Ok(out)
}

struct Line<'a> {
    offset: usize,
    text: &'a str,
}

fn lines(text: &str) -> Vec<Line<'_>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        let body = raw.strip_suffix('\n').unwrap_or(raw);
        let body = body.strip_suffix('\r').unwrap_or(body);
        out.push(Line { offset, text: body });
        offset += raw.len();
    }
    // Trailing blank lines carry no fields.
    while out.last().is_some_and(|l| l.text.trim().is_empty()) {
        out.pop();
    }
    out
}

/// Splits `label: value`, allowing at most one space after the colon.
fn split_label<'a>(line: &Line<'a>) -> Option<(&'a str, &'a str, usize)> {
    let colon = line.text.find(':')?;
    let label = &line.text[..colon];
    let rest = &line.text[colon + 1..];
    let (value, skip) = match rest.strip_prefix(' ') {
        Some(v) => (v, 1),
        None => (rest, 0),
    };
    Some((label, value, line.offset + colon + 1 + skip))
}

fn parse_categories(value: &str, offset: usize) -> Result<CategorySet, ParseError> {
    let mut set = CategorySet::new();
    if value.trim().is_empty() {
        return Ok(set);
    }
    let mut pos = 0;
    for part in value.split(',') {
        let name = part.trim();
        let at = offset + pos + (part.len() - part.trim_start().len());
        let cat: SkillCategory = name
            .parse()
            .map_err(|_| ParseError::new(at, format!("skill category name, found {name:?}")))?;
        if !set.insert(cat) {
            return Err(ParseError::new(at, format!("distinct categories, found duplicate {name:?}")));
        }
        pos += part.len() + 1;
    }
    Ok(set)
}

/// Parses the canonical form. The result is not validated; callers that
/// need a well-formed record run [`crate::model::validate_feedback`].
pub fn parse_feedback(text: &str) -> Result<Feedback, ParseError> {
    let lines = lines(text);
    let first = lines
        .first()
        .ok_or_else(|| ParseError::new(text.len(), "\"appropriate: true|false\""))?;
    let appropriate = match split_label(first) {
        Some((APPROPRIATE, "true", _)) => true,
        Some((APPROPRIATE, "false", _)) => false,
        Some((APPROPRIATE, _, at)) => return Err(ParseError::new(at, "true or false")),
        _ => return Err(ParseError::new(first.offset, "\"appropriate: true|false\"")),
    };
    let mut fb = Feedback {
        appropriate,
        goal_alignment: None,
        areas_for_improvement: None,
        alternative: None,
        positive_areas: None,
    };
    let mut next_slot = 0;
    for line in &lines[1..] {
        let expected = || format!("one of {}", OPTIONAL_ORDER[next_slot..].join(", "));
        let (label, value, at) = split_label(line).ok_or_else(|| ParseError::new(line.offset, expected()))?;
        let slot = OPTIONAL_ORDER[next_slot..]
            .iter()
            .position(|l| *l == label)
            .map(|p| p + next_slot)
            .ok_or_else(|| {
                if next_slot >= OPTIONAL_ORDER.len() {
                    ParseError::new(line.offset, "end of record")
                } else {
                    ParseError::new(line.offset, expected())
                }
            })?;
        match OPTIONAL_ORDER[slot] {
            POSITIVE => fb.positive_areas = Some(parse_categories(value, at)?),
            GOAL => fb.goal_alignment = Some(unescape(value, at)?),
            AREAS => fb.areas_for_improvement = Some(parse_categories(value, at)?),
            _ => fb.alternative = Some(unescape(value, at)?),
        }
        next_slot = slot + 1;
    }
    Ok(fb)
}

/// Header line opening one block of a multi-utterance response.
pub const BLOCK_HEADER: &str = "### utterance ";

/// Renders feedback for several utterances as blocks:
/// `### utterance <index>` followed by the record in canonical form.
pub fn serialize_blocks(records: &BTreeMap<usize, Feedback>) -> Result<String, InvalidFeedback> {
    let mut out = String::new();
    for (index, fb) in records {
        out.push_str(&format!("{BLOCK_HEADER}{index}\n"));
        out.push_str(&serialize_feedback(fb)?);
    }
    Ok(out)
}

/// Parses block-structured output. Text before the first header is
/// ignored; duplicate indices are rejected.
pub fn parse_blocks(text: &str) -> Result<BTreeMap<usize, Feedback>, ParseError> {
    let mut headers = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        if let Some(rest) = raw.strip_prefix(BLOCK_HEADER) {
            let idx_text = rest.trim_end();
            let index: usize = idx_text
                .parse()
                .map_err(|_| ParseError::new(offset + BLOCK_HEADER.len(), "utterance index"))?;
            headers.push((offset, offset + raw.len(), index));
        }
        offset += raw.len();
    }
    if headers.is_empty() {
        return Err(ParseError::new(0, format!("\"{BLOCK_HEADER}<index>\" header")));
    }
    let mut out = BTreeMap::new();
    for (k, &(start, body_start, index)) in headers.iter().enumerate() {
        let body_end = headers.get(k + 1).map_or(text.len(), |h| h.0);
        let fb = parse_feedback(&text[body_start..body_end]).map_err(|e| ParseError {
            offset: e.offset + body_start,
            expected: e.expected,
        })?;
        if out.insert(index, fb).is_some() {
            return Err(ParseError::new(start, format!("distinct utterance indices, found {index} twice")));
        }
    }
    Ok(out)
}
