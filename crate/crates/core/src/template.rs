//! Prompt templates with named `{placeholder}` slots.
//!
//! `{{` and `}}` produce literal braces. Only the known placeholders are
//! accepted so a typo fails at load time instead of leaking into prompts.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PLACEHOLDERS: [&str; 5] = ["question", "hint", "schema", "link", "instruction"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    segments: Vec<Segment>,
    bound: BTreeMap<String, String>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((i, ch)) = chars.next() {
            match ch {
                '{' if matches!(chars.peek(), Some((_, '{'))) => {
                    chars.next();
                    text.push('{');
                }
                '}' if matches!(chars.peek(), Some((_, '}'))) => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let rest = &source[i + 1..];
                    let end = rest
                        .find('}')
                        .ok_or_else(|| Error::Template(format!("unclosed placeholder at byte {i}")))?;
                    let name = &rest[..end];
                    if !PLACEHOLDERS.contains(&name) {
                        return Err(Error::Template(format!("unknown placeholder {{{name}}}")));
                    }
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(Segment::Slot(name.to_string()));
                    for _ in 0..name.chars().count() + 1 {
                        chars.next();
                    }
                }
                '}' => return Err(Error::Template(format!("stray `}}` at byte {i}"))),
                c => text.push(c),
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Ok(Template {
            source: source.to_string(),
            segments,
            bound: BTreeMap::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// SHA-256 of the template source, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.source.as_bytes()))
    }

    pub fn has_slot(&self, name: &str) -> bool {
        self.segments.iter().any(|s| matches!(s, Segment::Slot(n) if n == name))
    }

    /// Returns a copy with `name` fixed to `value`.
    pub fn bind(&self, name: &str, value: &str) -> Template {
        let mut t = self.clone();
        t.bound.insert(name.to_string(), value.to_string());
        t
    }

    /// Fills the slots; bound values first, then `vars`. Missing values render empty.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => {
                    let value = self
                        .bound
                        .get(name)
                        .map(String::as_str)
                        .or_else(|| vars.iter().find(|(k, _)| k == name).map(|(_, v)| *v))
                        .unwrap_or("");
                    out.push_str(value);
                }
            }
        }
        out
    }
}
