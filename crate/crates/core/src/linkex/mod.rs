//! Gold schema-link extraction: a SELECT parser plus reference resolution
//! that reverse-engineers which tables, columns and foreign keys a gold query
//! touches.

pub mod ast;
mod extract;
mod lexer;
mod link;
mod parser;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, ForeignKey, SchemaStore};

pub use ast::QueryAst;
pub use extract::{extract_from_ast, extract_links};
pub use link::{parse_link_line, quote_ident, serialize_link, LinkLine, LinkTable, SchemaLink};
pub use parser::parse_sql;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("syntax error at offset {offset} near `{token}`: {detail}")]
    Syntax { token: String, offset: usize, detail: String },

    #[error("unsupported construct at offset {offset} near `{token}`: {detail}")]
    Unsupported { token: String, offset: usize, detail: String },

    #[error("ambiguous column `{column}`: candidates {}", candidates.join(", "))]
    Ambiguous { column: String, candidates: Vec<String> },

    #[error("unknown column `{}{column}`", qualifier.as_ref().map(|q| format!("{q}.")).unwrap_or_default())]
    UnknownColumn { column: String, qualifier: Option<String> },

    #[error("unknown table or alias `{table}`")]
    UnknownTable { table: String },
}

/// Structured (table, column) pair for JSON output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnPair {
    pub table: String,
    pub column: String,
}

/// One line of the gold-link dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLinkRecord {
    pub question_id: i64,
    pub db_id: String,
    pub link: String,
    pub columns: Vec<ColumnPair>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl GoldLinkRecord {
    pub fn new(question_id: i64, db_id: &str, link: &SchemaLink) -> Self {
        GoldLinkRecord {
            question_id,
            db_id: db_id.to_string(),
            link: serialize_link(link),
            columns: link
                .columns()
                .map(|(t, c)| ColumnPair { table: t.to_string(), column: c.to_string() })
                .collect(),
            foreign_keys: link.foreign_keys().to_vec(),
        }
    }

    /// Rebuilds the link. Bare tables are recovered from the text form.
    pub fn to_link(&self) -> SchemaLink {
        let mut link = SchemaLink::new();
        for line in self.link.lines() {
            if let Some(LinkLine::Table { name, .. }) = parse_link_line(line) {
                link.add_table(&name);
            }
        }
        for p in &self.columns {
            link.add_column(&p.table, &p.column);
        }
        for fk in &self.foreign_keys {
            link.add_foreign_key(fk.clone());
        }
        link
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionFailure {
    pub question_id: i64,
    pub db_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct GoldLinks {
    pub links: BTreeMap<i64, SchemaLink>,
    pub failures: Vec<ExtractionFailure>,
}

impl GoldLinks {
    pub fn failure_rate(&self) -> f64 {
        let total = self.links.len() + self.failures.len();
        if total == 0 {
            0.0
        } else {
            self.failures.len() as f64 / total as f64
        }
    }
}

/// Extracts links for a batch. Per-example failures (parse, resolution,
/// unreadable schema) are collected rather than aborting.
pub fn build_gold_links(examples: &[Example], schemas: &SchemaStore) -> GoldLinks {
    let results: Vec<(i64, String, Result<SchemaLink, String>)> = examples
        .par_iter()
        .map(|ex| {
            let result = schemas
                .get(&ex.db_id)
                .map_err(|e| e.to_string())
                .and_then(|schema| extract_links(&ex.gold_sql, &schema).map_err(|e| e.to_string()));
            (ex.question_id, ex.db_id.clone(), result)
        })
        .collect();
    let mut out = GoldLinks::default();
    for (question_id, db_id, result) in results {
        match result {
            Ok(link) => {
                out.links.insert(question_id, link);
            }
            Err(reason) => out.failures.push(ExtractionFailure { question_id, db_id, reason }),
        }
    }
    out
}
