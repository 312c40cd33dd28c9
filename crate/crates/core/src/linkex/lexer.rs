//! Tokenizer for the SQLite SELECT dialect.

use super::LinkError;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    /// Bare word: keyword or unquoted identifier.
    Word(String),
    /// Identifier quoted with `"`, `` ` `` or `[...]`.
    Quoted { text: String, quote: char },
    /// Single-quoted string literal, unescaped.
    Str(String),
    Number(String),
    Blob(String),
    Punct(&'static str),
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub offset: usize,
}

impl Token {
    pub fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.kind, TokenKind::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    pub fn is_punct(&self, p: &str) -> bool {
        matches!(self.kind, TokenKind::Punct(q) if q == p)
    }

    /// Source-like rendering for error messages.
    pub fn display(&self) -> String {
        match &self.kind {
            TokenKind::Word(w) => w.clone(),
            TokenKind::Quoted { text, quote } => {
                let close = if *quote == '[' { ']' } else { *quote };
                format!("{quote}{text}{close}")
            }
            TokenKind::Str(s) => format!("'{s}'"),
            TokenKind::Number(n) => n.clone(),
            TokenKind::Blob(b) => format!("X'{b}'"),
            TokenKind::Punct(p) => (*p).to_string(),
            TokenKind::Eof => "<end of input>".to_string(),
        }
    }
}

const PUNCTS: [&str; 24] = [
    "||", "<=", ">=", "==", "!=", "<>", "<<", ">>", "(", ")", ",", ".", ";", "*", "+", "-", "/",
    "%", "=", "<", ">", "&", "|", "~",
];

fn syntax(offset: usize, token: &str, detail: &str) -> LinkError {
    LinkError::Syntax {
        token: token.to_string(),
        offset,
        detail: detail.to_string(),
    }
}

pub fn tokenize(sql: &str) -> Result<Vec<Token>, LinkError> {
    let bytes = sql.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if sql[i..].starts_with("--") {
            i = sql[i..].find('\n').map(|n| i + n + 1).unwrap_or(bytes.len());
            continue;
        }
        if sql[i..].starts_with("/*") {
            i = sql[i + 2..].find("*/").map(|n| i + 2 + n + 2).unwrap_or(bytes.len());
            continue;
        }
        let start = i;
        match c {
            b'\'' => {
                let (text, end) = read_quoted(sql, i, '\'')
                    .ok_or_else(|| syntax(start, "'", "unterminated string literal"))?;
                tokens.push(Token { kind: TokenKind::Str(text), offset: start });
                i = end;
            }
            b'"' | b'`' => {
                let q = c as char;
                let (text, end) = read_quoted(sql, i, q)
                    .ok_or_else(|| syntax(start, &q.to_string(), "unterminated quoted identifier"))?;
                tokens.push(Token { kind: TokenKind::Quoted { text, quote: q }, offset: start });
                i = end;
            }
            b'[' => {
                let close = sql[i + 1..]
                    .find(']')
                    .ok_or_else(|| syntax(start, "[", "unterminated bracketed identifier"))?;
                let text = sql[i + 1..i + 1 + close].to_string();
                tokens.push(Token { kind: TokenKind::Quoted { text, quote: '[' }, offset: start });
                i = i + 1 + close + 1;
            }
            b'x' | b'X' if bytes.get(i + 1) == Some(&b'\'') => {
                let (text, end) = read_quoted(sql, i + 1, '\'')
                    .ok_or_else(|| syntax(start, "X'", "unterminated blob literal"))?;
                tokens.push(Token { kind: TokenKind::Blob(text), offset: start });
                i = end;
            }
            b'0'..=b'9' => {
                i = scan_number(bytes, i);
                tokens.push(Token { kind: TokenKind::Number(sql[start..i].to_string()), offset: start });
            }
            b'.' if bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                i = scan_number(bytes, i);
                tokens.push(Token { kind: TokenKind::Number(sql[start..i].to_string()), offset: start });
            }
            _ if c == b'_' || c.is_ascii_alphabetic() || c >= 0x80 => {
                while i < bytes.len() {
                    let b = bytes[i];
                    if b == b'_' || b == b'$' || b.is_ascii_alphanumeric() || b >= 0x80 {
                        i += 1;
                    } else {
                        break;
                    }
                }
                tokens.push(Token { kind: TokenKind::Word(sql[start..i].to_string()), offset: start });
            }
            _ => {
                let p = PUNCTS
                    .iter()
                    .find(|p| sql[i..].starts_with(**p))
                    .ok_or_else(|| {
                        let ch = sql[i..].chars().next().unwrap_or('?');
                        LinkError::Unsupported {
                            token: ch.to_string(),
                            offset: start,
                            detail: "unexpected character".into(),
                        }
                    })?;
                tokens.push(Token { kind: TokenKind::Punct(p), offset: start });
                i += p.len();
            }
        }
    }
    tokens.push(Token { kind: TokenKind::Eof, offset: sql.len() });
    Ok(tokens)
}

/// Reads a quoted run starting at `start` (which holds the quote char).
/// A doubled quote is an escaped quote. Returns the content and the index past
/// the closing quote.
fn read_quoted(sql: &str, start: usize, quote: char) -> Option<(String, usize)> {
    let mut out = String::new();
    let mut chars = sql[start + 1..].char_indices().peekable();
    while let Some((off, ch)) = chars.next() {
        if ch == quote {
            if matches!(chars.peek(), Some((_, c)) if *c == quote) {
                out.push(quote);
                chars.next();
                continue;
            }
            return Some((out, start + 1 + off + ch.len_utf8()));
        }
        out.push(ch);
    }
    None
}

fn scan_number(bytes: &[u8], mut i: usize) -> usize {
    if bytes[i] == b'0' && matches!(bytes.get(i + 1), Some(b'x' | b'X')) {
        i += 2;
        while i < bytes.len() && bytes[i].is_ascii_hexdigit() {
            i += 1;
        }
        return i;
    }
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i < bytes.len() && matches!(bytes[i], b'e' | b'E') {
        let mut j = i + 1;
        if j < bytes.len() && matches!(bytes[j], b'+' | b'-') {
            j += 1;
        }
        if j < bytes.len() && bytes[j].is_ascii_digit() {
            i = j;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
    }
    i
}
