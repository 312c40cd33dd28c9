//! Post-processing of raw completions: SQL extraction, link parsing, merging
//! and validation against the schema.

use serde::{Deserialize, Serialize};

use crate::corpus::{ident_eq, DatabaseSchema};
use crate::linkex::{parse_link_line, parse_sql, ColumnPair, LinkLine, SchemaLink};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    Verbatim,
    FencedBlock,
    FirstStatement,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanedSql {
    pub sql: String,
    pub extraction: Extraction,
}

impl CleanedSql {
    fn failed() -> Self {
        CleanedSql { sql: String::new(), extraction: Extraction::Failed }
    }
}

const FENCE: &str = "```";

fn tidy(sql: &str) -> String {
    sql.trim().trim_end_matches(|c: char| c == ';' || c.is_whitespace()).to_string()
}

fn parses(sql: &str) -> bool {
    !sql.is_empty() && parse_sql(sql).is_ok()
}

/// Content of the first fenced code block, without the language tag.
fn first_fenced_block(raw: &str) -> Option<&str> {
    let start = raw.find(FENCE)? + FENCE.len();
    let rest = &raw[start..];
    let body_start = rest.find('\n').map_or(rest.len(), |i| i + 1);
    let tag = rest[..body_start].trim();
    let body = if tag.is_empty() || tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        &rest[body_start..]
    } else {
        rest
    };
    Some(body.find(FENCE).map_or(body, |end| &body[..end]))
}

/// Byte offsets of whole-word, case-insensitive SELECT/WITH keywords.
fn statement_starts(raw: &str) -> Vec<usize> {
    let bytes = raw.as_bytes();
    let is_word = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
    let mut out = Vec::new();
    for (i, _) in raw.char_indices() {
        if i > 0 && is_word(bytes[i - 1]) {
            continue;
        }
        for kw in ["select", "with"] {
            let end = i + kw.len();
            if end <= bytes.len()
                && raw[i..].get(..kw.len()).is_some_and(|w| w.eq_ignore_ascii_case(kw))
                && (end == bytes.len() || !is_word(bytes[end]))
            {
                out.push(i);
            }
        }
    }
    out
}

/// End of the statement starting at `start`: a semicolon outside quotes, a
/// blank line, a code fence, or the end of the text.
fn statement_end(raw: &str, start: usize) -> usize {
    let s = &raw[start..];
    let mut quote: Option<char> = None;
    let mut prev_newline = false;
    for (i, ch) in s.char_indices() {
        if let Some(q) = quote {
            if ch == q {
                quote = None;
            }
            continue;
        }
        match ch {
            '\'' | '"' | '`' if !s[i..].starts_with(FENCE) => quote = Some(ch),
            '[' => quote = Some(']'),
            ';' => return start + i,
            '`' => return start + i,
            '\n' if prev_newline => return start + i,
            _ => {}
        }
        if ch == '\n' {
            prev_newline = true;
        } else if !ch.is_whitespace() {
            prev_newline = false;
        }
    }
    raw.len()
}

/// Extracts a single SQL statement from model output: the whole text if it
/// parses, else the first fenced block, else a statement found by scanning
/// from each SELECT/WITH keyword.
pub fn clean_sql(raw: &str) -> CleanedSql {
    let whole = tidy(raw);
    if !whole.contains(FENCE) && parses(&whole) {
        return CleanedSql { sql: whole, extraction: Extraction::Verbatim };
    }
    if let Some(block) = first_fenced_block(raw) {
        let sql = tidy(block);
        if !sql.is_empty() && !sql.contains(FENCE) {
            return CleanedSql { sql, extraction: Extraction::FencedBlock };
        }
    }
    let candidates: Vec<(usize, String)> = statement_starts(raw)
        .into_iter()
        .map(|start| (start, tidy(&raw[start..statement_end(raw, start)])))
        .filter(|(_, sql)| !sql.is_empty() && !sql.contains(FENCE))
        .collect();
    let chosen = candidates
        .iter()
        .find(|(_, sql)| parses(sql))
        .or_else(|| {
            // Statements the parser does not cover, written the usual way.
            candidates
                .iter()
                .find(|(start, sql)| raw[*start..].starts_with(['S', 'W']) && sql.contains(char::is_whitespace))
        });
    match chosen {
        Some((_, sql)) => CleanedSql { sql: sql.clone(), extraction: Extraction::FirstStatement },
        None => CleanedSql::failed(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedLine {
    pub line: String,
    pub reason: String,
}

/// A parsed per-chunk answer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkParse {
    pub link: SchemaLink,
    /// Lines that could not be read as link text.
    pub flagged: Vec<FlaggedLine>,
    /// Tables mentioned that the chunk did not show; kept in `link`.
    pub outside_chunk: Vec<String>,
}

/// Reads link text leniently. `None` yields an empty link. An empty
/// `chunk_tables` disables the outside-chunk check.
pub fn parse_link_response<S: AsRef<str>>(raw: &str, chunk_tables: &[S]) -> LinkParse {
    let mut out = LinkParse::default();
    for line in raw.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(FENCE) {
            continue;
        }
        match parse_link_line(trimmed) {
            Some(LinkLine::None) => {}
            Some(LinkLine::Table { name, columns }) => {
                out.link.add_table(&name);
                for c in &columns {
                    out.link.add_column(&name, c);
                }
                let known = chunk_tables.is_empty() || chunk_tables.iter().any(|t| ident_eq(t.as_ref(), &name));
                if !known && !out.outside_chunk.iter().any(|t| ident_eq(t, &name)) {
                    out.outside_chunk.push(name);
                }
            }
            Some(LinkLine::ForeignKey(fk)) => out.link.add_foreign_key(fk),
            None => out.flagged.push(FlaggedLine {
                line: trimmed.to_string(),
                reason: "not a table(columns) or a.b = c.d line".into(),
            }),
        }
    }
    out
}

/// Set union of partial links; first-seen casing wins.
pub fn merge_links<'a>(parts: impl IntoIterator<Item = &'a SchemaLink>) -> SchemaLink {
    let mut out = SchemaLink::new();
    for p in parts {
        out.union_with(p);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repair {
    pub raw: ColumnPair,
    pub canonical: ColumnPair,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub raw: ColumnPair,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkValidation {
    pub accepted: SchemaLink,
    pub repaired: Vec<Repair>,
    pub rejected: Vec<Rejection>,
}

fn pair(table: &str, column: &str) -> ColumnPair {
    ColumnPair { table: table.to_string(), column: column.to_string() }
}

/// Resolves every link entry against the schema. Casing is canonicalized, a
/// column named under the wrong table moves to its only home table, anything
/// else is rejected. Foreign keys stay only when both endpoints are accepted.
pub fn validate_link(link: &SchemaLink, schema: &DatabaseSchema) -> LinkValidation {
    let mut v = LinkValidation::default();
    for t in link.tables() {
        let table = schema.table(&t.name);
        if t.columns.is_empty() {
            match table {
                Some(def) => {
                    v.accepted.add_table(&def.name);
                    if def.name != t.name {
                        v.repaired.push(Repair {
                            raw: pair(&t.name, ""),
                            canonical: pair(&def.name, ""),
                            reason: "table casing".into(),
                        });
                    }
                }
                None => v.rejected.push(Rejection { raw: pair(&t.name, ""), reason: "unknown table".into() }),
            }
            continue;
        }
        for c in &t.columns {
            if let Some((td, cd)) = schema.column(&t.name, c) {
                v.accepted.add_column(&td.name, &cd.name);
                if td.name != t.name || cd.name != *c {
                    v.repaired.push(Repair {
                        raw: pair(&t.name, c),
                        canonical: pair(&td.name, &cd.name),
                        reason: "casing".into(),
                    });
                }
                continue;
            }
            let homes = schema.tables_with_column(c);
            match homes.as_slice() {
                [home] => {
                    let cd = home.column(c).expect("home has column");
                    v.accepted.add_column(&home.name, &cd.name);
                    v.repaired.push(Repair {
                        raw: pair(&t.name, c),
                        canonical: pair(&home.name, &cd.name),
                        reason: format!("column only exists in table {}", home.name),
                    });
                }
                [] => v.rejected.push(Rejection {
                    raw: pair(&t.name, c),
                    reason: if table.is_some() { "unknown column".into() } else { "unknown table and column".into() },
                }),
                many => v.rejected.push(Rejection {
                    raw: pair(&t.name, c),
                    reason: format!(
                        "column not in {} and ambiguous among {}",
                        t.name,
                        many.iter().map(|h| h.name.as_str()).collect::<Vec<_>>().join(", ")
                    ),
                }),
            }
        }
    }
    for fk in link.foreign_keys() {
        let Some(canon) = schema.canonical_fk(fk) else { continue };
        if v.accepted.contains_column(&canon.from_table, &canon.from_column)
            && v.accepted.contains_column(&canon.to_table, &canon.to_column)
        {
            v.accepted.add_foreign_key(canon);
        }
    }
    v.accepted.sort_by_schema(schema);
    v
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: i64,
    pub sql: String,
    pub extraction: Extraction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_report: Option<LinkValidation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ColumnDef, ForeignKey, TableDef};
    use crate::linkex::serialize_link;

    fn toy() -> DatabaseSchema {
        DatabaseSchema::new(
            "toy",
            vec![
                TableDef::new(
                    "schools",
                    vec![
                        ColumnDef::new("CDSCode", "TEXT").primary_key(),
                        ColumnDef::new("MailStreet", "TEXT"),
                        ColumnDef::new("Charter", "INTEGER"),
                    ],
                ),
                TableDef::new(
                    "frpm",
                    vec![ColumnDef::new("CDSCode", "TEXT"), ColumnDef::new("FRPM_Count", "REAL")],
                ),
            ],
            vec![ForeignKey::new("frpm", "CDSCode", "schools", "CDSCode")],
        )
        .unwrap()
    }

    #[test]
    fn cleaning_cascade() {
        assert_eq!(
            clean_sql("```sql\nSELECT 1\n```"),
            CleanedSql { sql: "SELECT 1".into(), extraction: Extraction::FencedBlock }
        );
        assert_eq!(
            clean_sql("SELECT a FROM t; This query selects a."),
            CleanedSql { sql: "SELECT a FROM t".into(), extraction: Extraction::FirstStatement }
        );
        assert_eq!(clean_sql("I cannot answer that.").extraction, Extraction::Failed);
        assert_eq!(
            clean_sql("  SELECT a FROM t;\n"),
            CleanedSql { sql: "SELECT a FROM t".into(), extraction: Extraction::Verbatim }
        );
    }

    #[test]
    fn scan_skips_prose_mentions_of_select() {
        let raw = "We select the right rows with:\nSELECT name FROM t WHERE x = 'a;b'\n\nThat is all.";
        assert_eq!(
            clean_sql(raw),
            CleanedSql { sql: "SELECT name FROM t WHERE x = 'a;b'".into(), extraction: Extraction::FirstStatement }
        );
        let cte = "Answer: WITH c AS (SELECT 1 AS x) SELECT x FROM c";
        assert_eq!(clean_sql(cte).sql, "WITH c AS (SELECT 1 AS x) SELECT x FROM c");
    }

    #[test]
    fn window_queries_still_extracted() {
        let raw = "Here:\nSELECT rank() OVER (ORDER BY x) FROM t;";
        assert_eq!(clean_sql(raw).sql, "SELECT rank() OVER (ORDER BY x) FROM t");
    }

    #[test]
    fn link_response_parsing() {
        let none: &[&str] = &[];
        assert!(parse_link_response("None", none).link.is_empty());
        assert!(parse_link_response("none.", none).link.is_empty());
        let p = parse_link_response("schools(CDSCode, MailStreet)", &["schools"]);
        assert_eq!(p.link.column_count(), 2);
        let p = parse_link_response("schools(CDSCode)\ngarbage line", &["schools"]);
        assert_eq!(p.link.column_count(), 1);
        assert_eq!(p.flagged.len(), 1);
        let p = parse_link_response("frpm(CDSCode)", &["schools"]);
        assert_eq!(p.outside_chunk, vec!["frpm"]);
        assert_eq!(p.link.column_count(), 1);
    }

    #[test]
    fn merging() {
        let link = |pairs: &[(&str, &str)]| {
            let mut l = SchemaLink::new();
            for (t, c) in pairs {
                l.add_column(t, c);
            }
            l
        };
        let m = merge_links(&[link(&[("A", "x")]), link(&[("B", "y")])]);
        assert_eq!(m, link(&[("A", "x"), ("B", "y")]));
        let m = merge_links(&[link(&[("A", "x")]), link(&[("A", "X"), ("B", "y")])]);
        assert_eq!(m.column_count(), 2);
        assert_eq!(serialize_link(&m), "A(x)\nB(y)");
        let m = merge_links(&[SchemaLink::new(), link(&[("A", "x")])]);
        assert_eq!(m, link(&[("A", "x")]));
    }

    #[test]
    fn validation_repairs_and_rejects() {
        let s = toy();
        let mut l = SchemaLink::new();
        l.add_column("schools", "mailstreet");
        let v = validate_link(&l, &s);
        assert_eq!(serialize_link(&v.accepted), "schools(MailStreet)");
        assert_eq!(v.repaired.len(), 1);

        let mut l = SchemaLink::new();
        l.add_column("frpm", "MailStreet");
        let v = validate_link(&l, &s);
        assert_eq!(serialize_link(&v.accepted), "schools(MailStreet)");
        assert_eq!(v.repaired[0].canonical, pair("schools", "MailStreet"));

        let mut l = SchemaLink::new();
        l.add_column("schools", "Banana");
        let v = validate_link(&l, &s);
        assert!(v.accepted.is_empty());
        assert_eq!(v.rejected[0].reason, "unknown column");

        let mut l = SchemaLink::new();
        l.add_column("satscores", "CDSCode");
        let v = validate_link(&l, &s);
        assert!(v.rejected[0].reason.contains("ambiguous"));
    }

    #[test]
    fn validation_keeps_fks_with_accepted_endpoints() {
        let s = toy();
        let mut l = SchemaLink::new();
        l.add_column("schools", "cdscode");
        l.add_column("frpm", "CDSCode");
        l.add_foreign_key(ForeignKey::new("FRPM", "cdscode", "schools", "CDSCode"));
        let v = validate_link(&l, &s);
        assert_eq!(v.accepted.foreign_keys().len(), 1);
        assert_eq!(validate_link(&v.accepted, &s).accepted, v.accepted);
        assert!(validate_link(&v.accepted, &s).repaired.is_empty());

        let mut l = SchemaLink::new();
        l.add_column("schools", "CDSCode");
        l.add_foreign_key(ForeignKey::new("frpm", "CDSCode", "schools", "CDSCode"));
        assert!(validate_link(&l, &s).accepted.foreign_keys().is_empty());
    }
}
