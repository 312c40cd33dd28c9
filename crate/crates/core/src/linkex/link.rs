//! The schema link value type and its canonical text form.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{ident_eq, ident_key, DatabaseSchema, ForeignKey};

/// One table of a link with the columns used from it. An empty column list
/// means the table is used without any of its columns being referenced
/// (e.g. `SELECT COUNT(*) FROM t`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkTable {
    pub name: String,
    pub columns: Vec<String>,
}

/// Tables, columns and foreign keys needed to answer a question.
///
/// Identifiers compare case-insensitively; the first-seen casing is kept.
/// Equality is set equality and ignores insertion order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SchemaLink {
    tables: Vec<LinkTable>,
    foreign_keys: Vec<ForeignKey>,
}

impl SchemaLink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty() && self.foreign_keys.is_empty()
    }

    pub fn tables(&self) -> &[LinkTable] {
        &self.tables
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.iter().map(|t| t.name.as_str())
    }

    pub fn foreign_keys(&self) -> &[ForeignKey] {
        &self.foreign_keys
    }

    /// All (table, column) pairs.
    pub fn columns(&self) -> impl Iterator<Item = (&str, &str)> {
        self.tables
            .iter()
            .flat_map(|t| t.columns.iter().map(move |c| (t.name.as_str(), c.as_str())))
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    pub fn table(&self, name: &str) -> Option<&LinkTable> {
        self.tables.iter().find(|t| ident_eq(&t.name, name))
    }

    pub fn contains_table(&self, name: &str) -> bool {
        self.table(name).is_some()
    }

    pub fn contains_column(&self, table: &str, column: &str) -> bool {
        self.table(table)
            .is_some_and(|t| t.columns.iter().any(|c| ident_eq(c, column)))
    }

    /// Adds a table if absent; returns its position.
    pub fn add_table(&mut self, name: &str) -> usize {
        if let Some(i) = self.tables.iter().position(|t| ident_eq(&t.name, name)) {
            return i;
        }
        self.tables.push(LinkTable {
            name: name.trim().to_string(),
            columns: Vec::new(),
        });
        self.tables.len() - 1
    }

    pub fn add_column(&mut self, table: &str, column: &str) {
        let i = self.add_table(table);
        let t = &mut self.tables[i];
        if !t.columns.iter().any(|c| ident_eq(c, column)) {
            t.columns.push(column.trim().to_string());
        }
    }

    pub fn add_foreign_key(&mut self, fk: ForeignKey) {
        if !self.foreign_keys.contains(&fk) {
            self.foreign_keys.push(fk);
        }
    }

    /// Set union; on casing conflicts the receiver's casing wins.
    pub fn union_with(&mut self, other: &SchemaLink) {
        for t in &other.tables {
            self.add_table(&t.name);
            for c in &t.columns {
                self.add_column(&t.name, c);
            }
        }
        for fk in &other.foreign_keys {
            self.add_foreign_key(fk.clone());
        }
    }

    /// Keeps only the given tables; foreign keys survive when both endpoints do.
    pub fn restrict_to_tables<S: AsRef<str>>(&self, tables: &[S]) -> SchemaLink {
        let keep = |name: &str| tables.iter().any(|t| ident_eq(t.as_ref(), name));
        SchemaLink {
            tables: self.tables.iter().filter(|t| keep(&t.name)).cloned().collect(),
            foreign_keys: self
                .foreign_keys
                .iter()
                .filter(|fk| keep(&fk.from_table) && keep(&fk.to_table))
                .cloned()
                .collect(),
        }
    }

    /// Keeps only `columns` of `table` (used for column-split chunks). A bare
    /// table entry is kept only when `keep_bare` is set.
    pub fn restrict_to_columns<S: AsRef<str>>(&self, table: &str, columns: &[S], keep_bare: bool) -> SchemaLink {
        let mut out = SchemaLink::new();
        if let Some(t) = self.table(table) {
            if t.columns.is_empty() {
                if keep_bare {
                    out.add_table(&t.name);
                }
            } else {
                for c in &t.columns {
                    if columns.iter().any(|k| ident_eq(k.as_ref(), c)) {
                        out.add_column(&t.name, c);
                    }
                }
            }
        }
        out
    }

    /// Adds every schema foreign key whose endpoint tables are both in the link.
    pub fn complete_foreign_keys(&mut self, schema: &DatabaseSchema) {
        for fk in &schema.foreign_keys {
            if self.contains_table(&fk.from_table) && self.contains_table(&fk.to_table) {
                self.add_foreign_key(fk.clone());
            }
        }
    }

    /// Reorders tables and their columns into schema catalog order. Unknown
    /// identifiers keep their relative order after the known ones.
    pub fn sort_by_schema(&mut self, schema: &DatabaseSchema) {
        let pos = |name: &str| schema.table_index(name).unwrap_or(usize::MAX);
        self.tables.sort_by_key(|t| pos(&t.name));
        for t in &mut self.tables {
            if let Some(def) = schema.table(&t.name) {
                t.columns
                    .sort_by_key(|c| def.column_index(c).unwrap_or(usize::MAX));
            }
        }
    }

    fn key_sets(&self) -> (HashSet<String>, HashSet<(String, String)>, HashSet<ForeignKey>) {
        (
            self.tables.iter().map(|t| ident_key(&t.name)).collect(),
            self.columns().map(|(t, c)| (ident_key(t), ident_key(c))).collect(),
            self.foreign_keys.iter().cloned().collect(),
        )
    }
}

impl PartialEq for SchemaLink {
    fn eq(&self, other: &Self) -> bool {
        self.key_sets() == other.key_sets()
    }
}

impl Eq for SchemaLink {}

fn is_plain_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

/// Backtick-quotes identifiers that are not plain words.
pub fn quote_ident(s: &str) -> String {
    if is_plain_ident(s) && !s.eq_ignore_ascii_case("none") {
        s.to_string()
    } else {
        format!("`{}`", s.replace('`', "``"))
    }
}

/// Canonical text: one `table(col, ...)` line per table sorted
/// case-insensitively, columns in stored order, then sorted
/// `table.col = table.col` foreign key lines. An empty link is `None`.
pub fn serialize_link(link: &SchemaLink) -> String {
    if link.is_empty() {
        return "None".to_string();
    }
    let mut tables: Vec<&LinkTable> = link.tables.iter().collect();
    tables.sort_by(|a, b| ident_key(&a.name).cmp(&ident_key(&b.name)).then(a.name.cmp(&b.name)));
    let mut lines: Vec<String> = tables
        .iter()
        .map(|t| {
            let cols: Vec<String> = t.columns.iter().map(|c| quote_ident(c)).collect();
            format!("{}({})", quote_ident(&t.name), cols.join(", "))
        })
        .collect();
    let mut fk_lines: Vec<String> = link
        .foreign_keys
        .iter()
        .map(|fk| {
            let mut s = String::new();
            let _ = write!(
                s,
                "{}.{} = {}.{}",
                quote_ident(&fk.from_table),
                quote_ident(&fk.from_column),
                quote_ident(&fk.to_table),
                quote_ident(&fk.to_column)
            );
            s
        })
        .collect();
    fk_lines.sort_by(|a, b| a.to_ascii_lowercase().cmp(&b.to_ascii_lowercase()).then(a.cmp(b)));
    lines.extend(fk_lines);
    lines.join("\n")
}

/// One parsed line of the link text format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkLine {
    None,
    Table { name: String, columns: Vec<String> },
    ForeignKey(ForeignKey),
}

/// Strips one layer of identifier quoting, if present.
fn unquote(s: &str) -> Option<String> {
    let s = s.trim();
    let pairs = [('`', '`'), ('"', '"'), ('[', ']'), ('\'', '\'')];
    for (open, close) in pairs {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            let inner = &s[open.len_utf8()..s.len() - close.len_utf8()];
            return Some(if open == close {
                inner.replace(&format!("{open}{open}"), &open.to_string())
            } else {
                inner.to_string()
            });
        }
    }
    if s.is_empty() {
        None
    } else {
        Some(s.to_string())
    }
}

/// Splits on `sep` outside quotes and parentheses.
fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match quote {
            Some(q) => {
                if ch == q {
                    quote = None;
                }
            }
            None => match ch {
                '`' | '"' | '\'' => quote = Some(ch),
                '[' => quote = Some(']'),
                '(' => depth += 1,
                ')' => depth -= 1,
                c if c == sep && depth == 0 => {
                    parts.push(&s[start..i]);
                    start = i + ch.len_utf8();
                }
                _ => {}
            },
        }
    }
    parts.push(&s[start..]);
    parts
}

/// Parses one line of link text, tolerating list bullets, surrounding
/// whitespace and trailing punctuation. Returns `None` for unparseable lines.
pub fn parse_link_line(line: &str) -> Option<LinkLine> {
    let mut s = line.trim();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = s.strip_prefix(bullet) {
            s = rest.trim_start();
        }
    }
    let s = s.trim_end_matches(|c: char| matches!(c, '.' | ',' | ';' | ':') || c.is_whitespace());
    if s.is_empty() {
        return None;
    }
    if s.eq_ignore_ascii_case("none") {
        return Some(LinkLine::None);
    }
    if s.ends_with(')') {
        let open = top_level_open_paren(s)?;
        let raw_name = s[..open].trim();
        let name = unquote(raw_name)?;
        let quoted = raw_name.starts_with(['`', '"', '[', '\'']);
        if !quoted && name.contains(['(', ')', '=', ' ']) {
            return None;
        }
        let inner = &s[open + 1..s.len() - 1];
        let mut columns = Vec::new();
        if !inner.trim().is_empty() {
            for part in split_top_level(inner, ',') {
                columns.push(unquote(part)?);
            }
        }
        return Some(LinkLine::Table { name, columns });
    }
    let sides = split_top_level(s, '=');
    let sides: Vec<&str> = sides.into_iter().filter(|p| !p.is_empty()).collect();
    if sides.len() == 2 {
        let lhs = split_top_level(sides[0].trim(), '.');
        let rhs = split_top_level(sides[1].trim(), '.');
        if lhs.len() == 2 && rhs.len() == 2 {
            return Some(LinkLine::ForeignKey(ForeignKey::new(
                &unquote(lhs[0])?,
                &unquote(lhs[1])?,
                &unquote(rhs[0])?,
                &unquote(rhs[1])?,
            )));
        }
    }
    None
}

/// Position of the `(` that opens the column list, i.e. the first `(` at
/// depth zero outside quotes whose matching `)` is the final character.
fn top_level_open_paren(s: &str) -> Option<usize> {
    let mut quote: Option<char> = None;
    for (i, ch) in s.char_indices() {
        match quote {
            Some(q) => {
                if ch == q {
                    quote = None;
                }
            }
            None => match ch {
                '`' | '"' | '\'' => quote = Some(ch),
                '[' => quote = Some(']'),
                '(' => return Some(i),
                _ => {}
            },
        }
    }
    None
}
