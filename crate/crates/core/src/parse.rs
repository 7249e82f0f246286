//! Pulls the JSON object out of model output and checks it against the two
//! shapes the prompts ask for.
//!
//! Models wrap their answer in code fences or chat around it even when told
//! not to, so parsing runs in stages: strip an enclosing fence, cut out the
//! first balanced `{...}` span, decode it as strict JSON, then apply the
//! schema rules. Bounds the prompts only *request* (at most 8 sub-tasks,
//! under 15 words each, at least 5 options) degrade to warnings.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::MAX_CHILDREN;

const FENCE: &str = "```";
const MAX_TITLE_WORDS: usize = 15;
const MIN_OPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in model output")]
    NoObjectFound,
    #[error("JSON object starting at byte {start} is never closed")]
    UnbalancedObject { start: usize },
    #[error("{stage} failed: {detail}")]
    ParseFailed {
        stage: &'static str,
        raw: String,
        detail: String,
    },
    #[error("schema mismatch: {reason}")]
    SchemaMismatch { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseWarning {
    /// More than 8 sub-tasks came back; the tail was dropped.
    Truncated { original: usize },
    /// Title at `index` (0-based) is longer than requested.
    LengthExceeded { index: usize, words: usize },
    /// Fewer than 5 options.
    LowOptionCount { count: usize },
}

/// The first balanced object in a fence-stripped input, plus what surrounds it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawExtraction<'a> {
    pub prefix: &'a str,
    pub object_text: &'a str,
    pub suffix: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTaskList {
    pub titles: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<ParseWarning>,
}

/// Generated choices for one sub-task. The recommendation is selectable as
/// index 0; `options[i]` is index `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSet {
    pub recommended: String,
    pub options: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<ParseWarning>,
}

impl OptionSet {
    pub fn new(recommended: impl Into<String>, options: Vec<String>) -> Self {
        let mut set = Self {
            recommended: recommended.into(),
            options,
            warnings: Vec::new(),
        };
        if set.options.len() < MIN_OPTIONS {
            set.warnings.push(ParseWarning::LowOptionCount {
                count: set.options.len(),
            });
        }
        set
    }

    /// Recommendation plus options.
    pub fn selectable_len(&self) -> usize {
        self.options.len() + 1
    }

    pub fn entry(&self, index: usize) -> Option<&str> {
        match index {
            0 => Some(&self.recommended),
            i => self.options.get(i - 1).map(String::as_str),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &str> {
        core::iter::once(self.recommended.as_str()).chain(self.options.iter().map(String::as_str))
    }

    pub fn is_low(&self) -> bool {
        self.warnings
            .iter()
            .any(|w| matches!(w, ParseWarning::LowOptionCount { .. }))
    }
}

/// Trim, then drop one enclosing triple-backtick fence (with or without a
/// language tag on the opening line).
pub fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    if t.len() < 2 * FENCE.len() || !t.starts_with(FENCE) || !t.ends_with(FENCE) {
        return t;
    }
    let inner = &t[FENCE.len()..t.len() - FENCE.len()];
    if inner.contains(FENCE) {
        return t;
    }
    let body = match inner.find('\n') {
        Some(nl) if is_language_tag(inner[..nl].trim_end_matches('\r')) => &inner[nl + 1..],
        _ => inner,
    };
    body.trim()
}

fn is_language_tag(s: &str) -> bool {
    s.trim()
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '+' | '.'))
}

/// Locate the first `{` and its matching `}`, skipping braces that sit
/// inside string literals.
pub fn extract_object(raw: &str) -> Result<RawExtraction<'_>, ParseError> {
    let text = strip_fences(raw);
    let start = text.find('{').ok_or(ParseError::NoObjectFound)?;
    let bytes = text.as_bytes();

    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Ok(RawExtraction {
                        prefix: &text[..start],
                        object_text: &text[start..=i],
                        suffix: &text[i + 1..],
                    });
                }
            }
            _ => {}
        }
    }
    Err(ParseError::UnbalancedObject { start })
}

fn decode(raw: &str) -> Result<Map<String, Value>, ParseError> {
    let extraction = extract_object(raw)?;
    match serde_json::from_str::<Value>(extraction.object_text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(schema("top-level value is not an object")),
        Err(e) => Err(ParseError::ParseFailed {
            stage: "decode",
            raw: raw.to_string(),
            detail: e.to_string(),
        }),
    }
}

fn schema(reason: &str) -> ParseError {
    ParseError::SchemaMismatch {
        reason: reason.to_string(),
    }
}

fn string_list(map: &Map<String, Value>, key: &str) -> Result<Vec<String>, ParseError> {
    let items = match map.get(key) {
        None => return Err(schema(&alloc::format!("missing key `{key}`"))),
        Some(Value::Array(items)) => items,
        Some(_) => return Err(schema(&alloc::format!("`{key}` is not a list"))),
    };
    items
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
            Value::String(_) => Err(schema(&alloc::format!("`{key}`[{i}] is blank"))),
            _ => Err(schema(&alloc::format!("`{key}`[{i}] is not a string"))),
        })
        .collect()
}

/// Parse the decomposition reply: `{"sub_problems": [string, ...]}`.
pub fn parse_subtasks(raw: &str) -> Result<SubTaskList, ParseError> {
    let map = decode(raw)?;
    let mut titles = string_list(&map, "sub_problems")?;
    if titles.is_empty() {
        return Err(schema("`sub_problems` is empty"));
    }
    let mut warnings = Vec::new();
    if titles.len() > MAX_CHILDREN {
        warnings.push(ParseWarning::Truncated {
            original: titles.len(),
        });
        titles.truncate(MAX_CHILDREN);
    }
    for (index, title) in titles.iter().enumerate() {
        let words = title.split_whitespace().count();
        if words > MAX_TITLE_WORDS {
            warnings.push(ParseWarning::LengthExceeded { index, words });
        }
    }
    Ok(SubTaskList { titles, warnings })
}

/// Parse the options reply: `{"recommended": string, "options": [string, ...]}`.
pub fn parse_options(raw: &str) -> Result<OptionSet, ParseError> {
    let map = decode(raw)?;
    let recommended = match map.get("recommended") {
        None => return Err(schema("missing key `recommended`")),
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(schema("`recommended` is blank")),
        Some(_) => return Err(schema("`recommended` is not a string")),
    };
    let options = string_list(&map, "options")?;
    Ok(OptionSet::new(recommended, options))
}
