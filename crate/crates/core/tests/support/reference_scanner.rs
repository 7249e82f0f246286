//! Reference brace scanner used as a test oracle for `extract_object`.
//!
//! Deliberately different from the production scanner: it first finds the
//! closing quote of each string literal by counting the run of backslashes
//! in front of every candidate quote (odd run = escaped), then counts braces
//! only at positions outside those literals.

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefOutcome {
    Object { prefix: String, object_text: String, suffix: String },
    NoObject,
    Unbalanced,
}

impl RefOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            RefOutcome::Object { .. } => "object",
            RefOutcome::NoObject => "no_object",
            RefOutcome::Unbalanced => "unbalanced",
        }
    }
}

pub fn reference_strip(raw: &str) -> String {
    let t = raw.trim();
    let fence_count = t.matches("```").count();
    if t.len() >= 6 && t.starts_with("```") && t.ends_with("```") && fence_count == 2 {
        let inner = &t[3..t.len() - 3];
        let mut lines = inner.splitn(2, '\n');
        let first = lines.next().unwrap_or("");
        let rest = lines.next();
        let tag_like = first
            .trim()
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_+.".contains(c));
        return match rest {
            Some(rest) if tag_like => rest.trim().to_string(),
            _ => inner.trim().to_string(),
        };
    }
    t.to_string()
}

fn backslashes_before(chars: &[char], at: usize) -> usize {
    chars[..at].iter().rev().take_while(|&&c| c == '\\').count()
}

pub fn reference_extract(raw: &str) -> RefOutcome {
    let text = reference_strip(raw);
    let chars: Vec<char> = text.chars().collect();
    let Some(start) = chars.iter().position(|&c| c == '{') else {
        return RefOutcome::NoObject;
    };

    // pass 1: string literal spans (inclusive of quotes)
    let mut inside = vec![false; chars.len()];
    let mut i = start;
    while i < chars.len() {
        if chars[i] == '"' {
            let open = i;
            let mut j = i + 1;
            let close = loop {
                if j >= chars.len() {
                    break None;
                }
                if chars[j] == '"' && backslashes_before(&chars, j) % 2 == 0 {
                    break Some(j);
                }
                j += 1;
            };
            let end = close.unwrap_or(chars.len() - 1);
            for flag in &mut inside[open..=end] {
                *flag = true;
            }
            match close {
                Some(c) => i = c + 1,
                None => break,
            }
        } else {
            i += 1;
        }
    }

    // pass 2: brace depth outside strings
    let mut depth: i64 = 0;
    for k in start..chars.len() {
        if inside[k] {
            continue;
        }
        match chars[k] {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return RefOutcome::Object {
                        prefix: chars[..start].iter().collect(),
                        object_text: chars[start..=k].iter().collect(),
                        suffix: chars[k + 1..].iter().collect(),
                    };
                }
            }
            _ => {}
        }
    }
    RefOutcome::Unbalanced
}
