//! The three prompt templates and the renderer that fills them.
//!
//! Template bodies live in `templates/*.txt` and are embedded at compile
//! time. Syntax: `{name}` is a placeholder, `{{` and `}}` are literal braces.
//! Bound values are inserted verbatim and never re-scanned.

use alloc::borrow::Cow;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const DECOMPOSE: &str = include_str!("../templates/decompose.txt");
const OPTIONS: &str = include_str!("../templates/options.txt");
const SUMMARIZE: &str = include_str!("../templates/summarize.txt");

/// Printed in place of an empty selection list or empty preference text.
pub const NONE_SENTINEL: &str = "None";

const PLACEHOLDERS: [&str; 4] = ["text", "context", "selected_options", "user_context"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Decompose,
    Options,
    Summarize,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [
        TemplateKind::Decompose,
        TemplateKind::Options,
        TemplateKind::Summarize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Decompose => "decompose",
            TemplateKind::Options => "options",
            TemplateKind::Summarize => "summarize",
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for TemplateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| alloc::format!("unknown prompt kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("missing binding for placeholder `{0}`")]
    MissingBinding(&'static str),
    #[error("binding `{0}` is not used by this template")]
    UnexpectedBinding(&'static str),
    #[error("unknown placeholder `{0}`")]
    UnknownPlaceholder(String),
    #[error("unmatched brace at byte {0}")]
    StrayBrace(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    body: Cow<'static, str>,
}

enum Segment<'a> {
    Literal(&'a str),
    Brace(char),
    Slot(&'static str),
}

impl PromptTemplate {
    pub fn builtin(kind: TemplateKind) -> Self {
        let body = match kind {
            TemplateKind::Decompose => DECOMPOSE,
            TemplateKind::Options => OPTIONS,
            TemplateKind::Summarize => SUMMARIZE,
        };
        Self {
            kind,
            body: Cow::Borrowed(body),
        }
    }

    pub fn new(kind: TemplateKind, body: impl Into<String>) -> Self {
        Self {
            kind,
            body: Cow::Owned(body.into()),
        }
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Placeholder names in order of appearance, repeats included.
    pub fn placeholders(&self) -> Result<Vec<&'static str>, PromptError> {
        Ok(self
            .segments()?
            .into_iter()
            .filter_map(|s| match s {
                Segment::Slot(name) => Some(name),
                _ => None,
            })
            .collect())
    }

    fn segments(&self) -> Result<Vec<Segment<'_>>, PromptError> {
        let body: &str = &self.body;
        let bytes = body.as_bytes();
        let mut out = Vec::new();
        let mut lit_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            let b = bytes[i];
            if b != b'{' && b != b'}' {
                i += 1;
                continue;
            }
            if lit_start < i {
                out.push(Segment::Literal(&body[lit_start..i]));
            }
            if bytes.get(i + 1) == Some(&b) {
                out.push(Segment::Brace(b as char));
                i += 2;
            } else if b == b'}' {
                return Err(PromptError::StrayBrace(i));
            } else {
                let close = body[i + 1..]
                    .find('}')
                    .map(|off| i + 1 + off)
                    .ok_or(PromptError::StrayBrace(i))?;
                let name = &body[i + 1..close];
                if name.is_empty() || !name.bytes().all(|c| c.is_ascii_lowercase() || c == b'_') {
                    return Err(PromptError::StrayBrace(i));
                }
                let slot = PLACEHOLDERS
                    .into_iter()
                    .find(|p| *p == name)
                    .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
                out.push(Segment::Slot(slot));
                i = close + 1;
            }
            lit_start = i;
        }
        if lit_start < bytes.len() {
            out.push(Segment::Literal(&body[lit_start..]));
        }
        Ok(out)
    }
}

/// Named values for a render. `selected_options` and `user_context` fall
/// back to `"None"` when absent or blank; `text` and `context` have no
/// fallback.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptBindings {
    pub text: Option<String>,
    pub context: Option<String>,
    pub selected_options: Option<String>,
    pub user_context: Option<String>,
}

impl PromptBindings {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn with_context(mut self, root_query: impl Into<String>) -> Self {
        self.context = Some(root_query.into());
        self
    }

    pub fn with_selected_options(mut self, digest: impl Into<String>) -> Self {
        self.selected_options = Some(digest.into());
        self
    }

    pub fn with_user_context(mut self, text: impl Into<String>) -> Self {
        self.user_context = Some(text.into());
        self
    }

    fn value(&self, name: &'static str) -> Result<&str, PromptError> {
        fn sentinel(v: &Option<String>) -> &str {
            match v.as_deref() {
                Some(s) if !s.trim().is_empty() => s,
                _ => NONE_SENTINEL,
            }
        }
        match name {
            "text" => self.text.as_deref().ok_or(PromptError::MissingBinding("text")),
            "context" => self
                .context
                .as_deref()
                .ok_or(PromptError::MissingBinding("context")),
            "selected_options" => Ok(sentinel(&self.selected_options)),
            _ => Ok(sentinel(&self.user_context)),
        }
    }
}

pub fn render(template: &PromptTemplate, bindings: &PromptBindings) -> Result<String, PromptError> {
    let segments = template.segments()?;
    let uses = |name| segments.iter().any(|s| matches!(s, Segment::Slot(n) if *n == name));
    if bindings.context.is_some() && !uses("context") {
        return Err(PromptError::UnexpectedBinding("context"));
    }
    let mut out = String::with_capacity(template.body.len() + 256);
    for seg in &segments {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Brace(c) => out.push(*c),
            Segment::Slot(name) => out.push_str(bindings.value(name)?),
        }
    }
    Ok(out)
}

/// Lower-case hex SHA-256 of the template body.
pub fn golden_digest(template: &PromptTemplate) -> String {
    let hash = Sha256::digest(template.body.as_bytes());
    let mut hex = String::with_capacity(64);
    for b in hash.iter() {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}
