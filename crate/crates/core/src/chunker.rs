//! Token-budgeted schema chunking.
//!
//! Tables are packed greedily in catalog order: each table joins the current
//! prompt if the whole prompt still fits the budget, otherwise a new prompt is
//! started. Question and hint are part of every prompt's fixed scaffold.
//! A table too large for a prompt of its own first loses its descriptions and
//! is then split by columns, repeating the table header in every part.

use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ident_eq, DatabaseSchema, TableDef};
use crate::error::{Error, Result};
use crate::linkex::quote_ident;
use crate::template::Template;

/// Default per-prompt budget for chunked schema linking.
pub const DEFAULT_CHUNK_BUDGET: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// `ceil(bytes / 4)`. Set budgets roughly 10% below the model limit.
    #[default]
    Heuristic,
    /// Command that reads text on stdin and prints a token count.
    External(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub max_tokens: usize,
    #[serde(default)]
    pub tokenizer: Tokenizer,
}

impl TokenBudget {
    pub fn new(max_tokens: usize) -> Result<Self> {
        Self::with_tokenizer(max_tokens, Tokenizer::Heuristic)
    }

    pub fn with_tokenizer(max_tokens: usize, tokenizer: Tokenizer) -> Result<Self> {
        if max_tokens == 0 {
            return Err(Error::Validation("token budget must be positive".into()));
        }
        if let Tokenizer::External(cmd) = &tokenizer {
            if cmd.is_empty() {
                return Err(Error::Validation("external tokenizer command is empty".into()));
            }
        }
        Ok(TokenBudget { max_tokens, tokenizer })
    }

    pub fn fits(&self, text: &str) -> Result<bool> {
        Ok(count_tokens(text, self)? <= self.max_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BudgetError {
    #[error("prompt scaffold alone needs {tokens} tokens, budget is {max}")]
    ScaffoldTooLarge { tokens: usize, max: usize },

    #[error("column {table}.{column} cannot fit a prompt even without descriptions ({tokens} > {max} tokens)")]
    ColumnTooLarge { table: String, column: String, tokens: usize, max: usize },

    #[error("prompt needs {tokens} tokens after shedding all descriptions, budget is {max}")]
    OverBudget { tokens: usize, max: usize },
}

pub fn count_tokens(text: &str, budget: &TokenBudget) -> Result<usize> {
    match &budget.tokenizer {
        Tokenizer::Heuristic => Ok(text.len().div_ceil(4)),
        Tokenizer::External(cmd) => external_count(cmd, text),
    }
}

fn external_count(cmd: &[String], text: &str) -> Result<usize> {
    let (program, args) = cmd
        .split_first()
        .ok_or_else(|| Error::Tokenizer("empty tokenizer command".into()))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Tokenizer(format!("cannot start {program}: {e}")))?;
    {
        let mut stdin = child.stdin.take().expect("stdin piped");
        stdin
            .write_all(text.as_bytes())
            .map_err(|e| Error::Tokenizer(format!("writing to {program}: {e}")))?;
    }
    let out = child
        .wait_with_output()
        .map_err(|e| Error::Tokenizer(format!("waiting for {program}: {e}")))?;
    if !out.status.success() {
        return Err(Error::Tokenizer(format!(
            "{program} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout
        .trim()
        .parse()
        .map_err(|_| Error::Tokenizer(format!("{program} printed {:?}, expected a count", stdout.trim())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnBlock {
    pub name: String,
    pub line: String,
    pub description: Option<String>,
    pub values: Option<String>,
}

/// Rendering of one table (or one column-split part of it).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableBlock {
    pub table: String,
    pub columns: Vec<ColumnBlock>,
    /// Set on column-split parts.
    pub partial: bool,
}

impl TableBlock {
    pub fn from_table(table: &TableDef) -> Self {
        TableBlock {
            table: table.name.clone(),
            columns: table
                .columns
                .iter()
                .map(|c| {
                    let mut line = format!("  {}", quote_ident(&c.name));
                    let mut attrs = Vec::new();
                    if !c.sql_type.is_empty() {
                        attrs.push(c.sql_type.clone());
                    }
                    if c.is_primary_key {
                        attrs.push("primary key".to_string());
                    }
                    if !attrs.is_empty() {
                        line.push_str(&format!(" ({})", attrs.join(", ")));
                    }
                    ColumnBlock {
                        name: c.name.clone(),
                        line,
                        description: c.description.as_ref().map(|d| format!("    description: {d}")),
                        values: c.value_description.as_ref().map(|v| format!("    values: {v}")),
                    }
                })
                .collect(),
            partial: false,
        }
    }

    fn header(&self) -> String {
        if self.partial {
            format!("Table {} (partial, columns split across prompts)", quote_ident(&self.table))
        } else {
            format!("Table {}", quote_ident(&self.table))
        }
    }

    fn render_into(&self, out: &mut Vec<String>) {
        out.push(self.header());
        for c in &self.columns {
            out.push(c.line.clone());
            out.extend(c.description.iter().cloned());
            out.extend(c.values.iter().cloned());
        }
    }
}

/// Renders table blocks plus the foreign-key lines whose endpoints are both
/// present, and `related table` notes for foreign keys leaving the set.
pub fn render_blocks(schema: &DatabaseSchema, blocks: &[TableBlock]) -> String {
    let present = |name: &str| blocks.iter().any(|b| ident_eq(&b.table, name));
    let mut lines = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        block.render_into(&mut lines);
        let first_of_table = blocks[..i].iter().all(|b| !ident_eq(&b.table, &block.table));
        if first_of_table {
            let mut related: Vec<&str> = schema
                .foreign_keys
                .iter()
                .filter(|fk| ident_eq(&fk.from_table, &block.table) && !present(&fk.to_table))
                .map(|fk| fk.to_table.as_str())
                .collect();
            related.sort_by_key(|t| crate::corpus::ident_key(t));
            related.dedup_by(|a, b| ident_eq(a, b));
            for r in related {
                lines.push(format!("  related table: {}", quote_ident(r)));
            }
        }
    }
    let fks: Vec<String> = schema
        .foreign_keys
        .iter()
        .filter(|fk| present(&fk.from_table) && present(&fk.to_table))
        .map(|fk| {
            format!(
                "  {}.{} = {}.{}",
                quote_ident(&fk.from_table),
                quote_ident(&fk.from_column),
                quote_ident(&fk.to_table),
                quote_ident(&fk.to_column)
            )
        })
        .collect();
    if !fks.is_empty() {
        lines.push("Foreign keys:".to_string());
        lines.extend(fks);
    }
    lines.join("\n")
}

/// Full rendering of the named tables with all descriptions.
pub fn render_tables<S: AsRef<str>>(schema: &DatabaseSchema, tables: &[S]) -> String {
    let blocks: Vec<TableBlock> = tables
        .iter()
        .filter_map(|t| schema.table(t.as_ref()))
        .map(TableBlock::from_table)
        .collect();
    render_blocks(schema, &blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShedKind {
    ValueDescription,
    Description,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShedItem {
    pub table: String,
    pub column: String,
    pub kind: ShedKind,
    pub line: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShedReport {
    pub dropped: Vec<ShedItem>,
    pub fits: bool,
    pub token_count: usize,
}

/// Drop order: value descriptions from the last table's last column
/// backwards, then descriptions in the same order.
fn shed_order(blocks: &[TableBlock]) -> Vec<(usize, usize, ShedKind)> {
    let mut order = Vec::new();
    for kind in [ShedKind::ValueDescription, ShedKind::Description] {
        for (bi, block) in blocks.iter().enumerate().rev() {
            for (ci, col) in block.columns.iter().enumerate().rev() {
                let present = match kind {
                    ShedKind::ValueDescription => col.values.is_some(),
                    ShedKind::Description => col.description.is_some(),
                };
                if present {
                    order.push((bi, ci, kind));
                }
            }
        }
    }
    order
}

fn apply_shed(blocks: &[TableBlock], order: &[(usize, usize, ShedKind)]) -> (Vec<TableBlock>, Vec<ShedItem>) {
    let mut out = blocks.to_vec();
    let mut dropped = Vec::new();
    for &(bi, ci, kind) in order {
        let table = out[bi].table.clone();
        let col = &mut out[bi].columns[ci];
        let line = match kind {
            ShedKind::ValueDescription => col.values.take(),
            ShedKind::Description => col.description.take(),
        };
        dropped.push(ShedItem {
            table,
            column: col.name.clone(),
            kind,
            line: line.unwrap_or_default(),
        });
    }
    (out, dropped)
}

/// Drops description lines until `wrap(rendering)` fits the budget, or until
/// nothing is left to drop. The report says whether the result fits.
pub fn shed_descriptions(
    schema: &DatabaseSchema,
    blocks: &[TableBlock],
    budget: &TokenBudget,
    wrap: &dyn Fn(&str) -> String,
) -> Result<(Vec<TableBlock>, ShedReport)> {
    let order = shed_order(blocks);
    let measure = |k: usize| -> Result<(Vec<TableBlock>, Vec<ShedItem>, usize)> {
        let (b, d) = apply_shed(blocks, &order[..k]);
        let tokens = count_tokens(&wrap(&render_blocks(schema, &b)), budget)?;
        Ok((b, d, tokens))
    };
    let (b0, d0, t0) = measure(0)?;
    if t0 <= budget.max_tokens {
        return Ok((b0, ShedReport { dropped: d0, fits: true, token_count: t0 }));
    }
    let (bn, dn, tn) = measure(order.len())?;
    if tn > budget.max_tokens {
        return Ok((bn, ShedReport { dropped: dn, fits: false, token_count: tn }));
    }
    // Smallest k in (0, n] that fits; token counts shrink as k grows.
    let (mut lo, mut hi) = (0usize, order.len());
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if measure(mid)?.2 <= budget.max_tokens {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (b, d, t) = measure(hi)?;
    Ok((b, ShedReport { dropped: d, fits: true, token_count: t }))
}

/// One column-split part of a table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSplit {
    pub table: String,
    pub columns: Vec<String>,
    pub part: usize,
    pub parts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptChunk {
    pub index: usize,
    pub total: usize,
    pub text: String,
    pub included_tables: Vec<String>,
    pub token_count: usize,
    /// Blocks as rendered into `text` (after any shedding or splitting).
    #[serde(skip)]
    pub blocks: Vec<TableBlock>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shed: Vec<ShedItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub column_splits: Vec<ColumnSplit>,
}

impl PromptChunk {
    pub fn has_column_split(&self) -> bool {
        !self.column_splits.is_empty()
    }
}

struct Packer<'a> {
    schema: &'a DatabaseSchema,
    budget: &'a TokenBudget,
    wrap: &'a dyn Fn(&str) -> String,
}

#[derive(Default)]
struct Pending {
    blocks: Vec<TableBlock>,
    shed: Vec<ShedItem>,
}

impl Pending {
    fn flush_into(&mut self, done: &mut Vec<Pending>) {
        if !self.blocks.is_empty() {
            done.push(std::mem::take(self));
        }
    }
}

fn with_column(blocks: &[TableBlock], table: &str, column: ColumnBlock) -> Vec<TableBlock> {
    let mut out = blocks.to_vec();
    match out.last_mut() {
        Some(last) if last.partial && ident_eq(&last.table, table) => last.columns.push(column),
        _ => out.push(TableBlock { table: table.to_string(), columns: vec![column], partial: true }),
    }
    out
}

impl Packer<'_> {
    fn tokens(&self, blocks: &[TableBlock]) -> Result<usize> {
        count_tokens(&(self.wrap)(&render_blocks(self.schema, blocks)), self.budget)
    }

    fn fits(&self, blocks: &[TableBlock]) -> Result<bool> {
        Ok(self.tokens(blocks)? <= self.budget.max_tokens)
    }

    fn shed_alone(&self, block: TableBlock) -> Result<(TableBlock, ShedReport)> {
        let (mut blocks, report) = shed_descriptions(self.schema, &[block], self.budget, self.wrap)?;
        Ok((blocks.pop().expect("one block"), report))
    }

    fn pack(&self) -> Result<Vec<Pending>> {
        let scaffold = self.tokens(&[])?;
        if scaffold > self.budget.max_tokens {
            return Err(BudgetError::ScaffoldTooLarge { tokens: scaffold, max: self.budget.max_tokens }.into());
        }
        let mut done = Vec::new();
        let mut current = Pending::default();

        for table in &self.schema.tables {
            let block = TableBlock::from_table(table);
            let mut candidate = current.blocks.clone();
            candidate.push(block.clone());
            if self.fits(&candidate)? {
                current.blocks = candidate;
                continue;
            }
            if self.fits(std::slice::from_ref(&block))? {
                current.flush_into(&mut done);
                current.blocks = vec![block];
                continue;
            }

            let (shed_block, report) = self.shed_alone(block.clone())?;
            if report.fits {
                let mut candidate = current.blocks.clone();
                candidate.push(shed_block.clone());
                if self.fits(&candidate)? {
                    current.blocks = candidate;
                    current.shed.extend(report.dropped);
                } else {
                    current.flush_into(&mut done);
                    current = Pending { blocks: vec![shed_block], shed: report.dropped };
                }
                continue;
            }

            for column in &block.columns {
                let candidate = with_column(&current.blocks, &block.table, column.clone());
                if self.fits(&candidate)? {
                    current.blocks = candidate;
                    continue;
                }
                let single = with_column(&[], &block.table, column.clone());
                if self.fits(&single)? {
                    current.flush_into(&mut done);
                    current.blocks = single;
                    continue;
                }
                let single = single.into_iter().next().expect("one block");
                let (mut shed_block, report) = self.shed_alone(single)?;
                if !report.fits {
                    return Err(BudgetError::ColumnTooLarge {
                        table: block.table.clone(),
                        column: column.name.clone(),
                        tokens: report.token_count,
                        max: self.budget.max_tokens,
                    }
                    .into());
                }
                let shed_column = shed_block.columns.pop().expect("one column");
                let candidate = with_column(&current.blocks, &block.table, shed_column.clone());
                if self.fits(&candidate)? {
                    current.blocks = candidate;
                    current.shed.extend(report.dropped);
                    continue;
                }
                current.flush_into(&mut done);
                current = Pending {
                    blocks: with_column(&[], &block.table, shed_column),
                    shed: report.dropped,
                };
            }
        }
        current.flush_into(&mut done);
        Ok(done)
    }
}

/// Packs a schema into the fewest prompts the greedy catalog-order pass
/// allows. `template` receives `{question}`, `{hint}` and `{schema}`.
pub fn chunk_schema(
    schema: &DatabaseSchema,
    question: &str,
    hint: &str,
    budget: &TokenBudget,
    template: &Template,
) -> Result<Vec<PromptChunk>> {
    let wrap = |schema_text: &str| {
        template.render(&[("question", question), ("hint", hint), ("schema", schema_text)])
    };
    let packer = Packer { schema, budget, wrap: &wrap };
    let pending = packer.pack()?;

    let mut parts_per_table: Vec<(String, usize)> = Vec::new();
    for block in pending.iter().flat_map(|p| &p.blocks).filter(|b| b.partial) {
        match parts_per_table.iter_mut().find(|(t, _)| ident_eq(t, &block.table)) {
            Some((_, n)) => *n += 1,
            None => parts_per_table.push((block.table.clone(), 1)),
        }
    }
    let mut seen_parts: Vec<(String, usize)> = Vec::new();

    let total = pending.len();
    pending
        .into_iter()
        .enumerate()
        .map(|(index, p)| {
            let text = wrap(&render_blocks(schema, &p.blocks));
            let token_count = count_tokens(&text, budget)?;
            let mut included_tables: Vec<String> = Vec::new();
            let mut column_splits = Vec::new();
            for b in &p.blocks {
                if !included_tables.iter().any(|t| ident_eq(t, &b.table)) {
                    included_tables.push(b.table.clone());
                }
                if b.partial {
                    let parts = parts_per_table
                        .iter()
                        .find(|(t, _)| ident_eq(t, &b.table))
                        .map_or(1, |(_, n)| *n);
                    let part = match seen_parts.iter_mut().find(|(t, _)| ident_eq(t, &b.table)) {
                        Some((_, n)) => {
                            *n += 1;
                            *n - 1
                        }
                        None => {
                            seen_parts.push((b.table.clone(), 1));
                            0
                        }
                    };
                    column_splits.push(ColumnSplit {
                        table: b.table.clone(),
                        columns: b.columns.iter().map(|c| c.name.clone()).collect(),
                        part,
                        parts,
                    });
                }
            }
            Ok(PromptChunk {
                index,
                total,
                text,
                included_tables,
                token_count,
                blocks: p.blocks,
                shed: p.shed,
                column_splits,
            })
        })
        .collect()
}

/// JSON Lines record for chunk dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkDumpRecord {
    pub question_id: i64,
    pub index: usize,
    pub total: usize,
    pub included_tables: Vec<String>,
    pub token_count: usize,
    pub text: String,
}

impl ChunkDumpRecord {
    pub fn new(question_id: i64, chunk: &PromptChunk) -> Self {
        ChunkDumpRecord {
            question_id,
            index: chunk.index,
            total: chunk.total,
            included_tables: chunk.included_tables.clone(),
            token_count: chunk.token_count,
            text: chunk.text.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ColumnDef, ForeignKey};

    fn heuristic(max: usize) -> TokenBudget {
        TokenBudget::new(max).unwrap()
    }

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

    fn template() -> Template {
        Template::parse("Question: {question}\nHint: {hint}\n{schema}\nAnswer:").unwrap()
    }

    #[test]
    fn heuristic_counts() {
        assert_eq!(count_tokens("", &heuristic(1)).unwrap(), 0);
        assert_eq!(count_tokens("SELECT", &heuristic(1)).unwrap(), 2);
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(TokenBudget::new(0).is_err());
    }

    #[test]
    fn external_tokenizer_counts_and_fails_loudly() {
        let wc = TokenBudget::with_tokenizer(10, Tokenizer::External(vec!["wc".into(), "-w".into()])).unwrap();
        assert_eq!(count_tokens("one two three", &wc).unwrap(), 3);
        let bad = TokenBudget::with_tokenizer(10, Tokenizer::External(vec!["false".into()])).unwrap();
        assert!(matches!(count_tokens("x", &bad), Err(Error::Tokenizer(_))));
        let missing =
            TokenBudget::with_tokenizer(10, Tokenizer::External(vec!["/nonexistent/tok".into()])).unwrap();
        assert!(matches!(count_tokens("x", &missing), Err(Error::Tokenizer(_))));
    }

    #[test]
    fn rendering_of_toy_tables() {
        assert_eq!(
            render_tables(&toy(), &["schools", "frpm"]),
            "Table schools\n  CDSCode (TEXT, primary key)\n  MailStreet (TEXT)\n  Charter (INTEGER)\n\
             Table frpm\n  CDSCode (TEXT)\n  FRPM_Count (REAL)\n\
             Foreign keys:\n  frpm.CDSCode = schools.CDSCode"
        );
        assert_eq!(
            render_tables(&toy(), &["frpm"]),
            "Table frpm\n  CDSCode (TEXT)\n  FRPM_Count (REAL)\n  related table: schools"
        );
    }

    #[test]
    fn generous_budget_gives_one_chunk() {
        let chunks = chunk_schema(&toy(), "q?", "h", &heuristic(DEFAULT_CHUNK_BUDGET), &template()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].included_tables, vec!["schools", "frpm"]);
        assert_eq!(chunks[0].total, 1);
    }

    #[test]
    fn forcing_budget_gives_two_chunks() {
        // Byte lengths by hand: scaffold "Question: q?\nHint: h\n" + "\nAnswer:" = 21 + 8 = 29.
        // schools block = 13+1+29+1+19+1+19 = 83 bytes -> prompt 112 bytes = 28 tokens.
        // schools+frpm adds 1+10+1+16+1+19 for frpm and 1+13+1+32 for FKs = 95 -> 207 bytes = 52 tokens.
        // frpm alone: 10+1+16+1+19+1+24 = 72 -> 101 bytes = 26 tokens.
        let t = template();
        let scaffold = t.render(&[("question", "q?"), ("hint", "h"), ("schema", "")]);
        assert_eq!(scaffold.len(), 29);
        let both = t.render(&[("question", "q?"), ("hint", "h"), ("schema", &render_tables(&toy(), &["schools", "frpm"]))]);
        assert_eq!(both.len(), 207);
        let only_schools = t.render(&[("question", "q?"), ("hint", "h"), ("schema", &render_tables(&toy(), &["schools"]))]);
        assert_eq!(only_schools.len(), 112);

        let chunks = chunk_schema(&toy(), "q?", "h", &heuristic(40), &t).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].included_tables, vec!["schools"]);
        assert_eq!(chunks[1].included_tables, vec!["frpm"]);
        assert_eq!(chunks[0].token_count, 28);
        assert_eq!(chunks[1].token_count, 26);
        assert!(chunks.iter().all(|c| c.total == 2 && c.text.contains("q?")));
    }

    #[test]
    fn scaffold_over_budget() {
        let err = chunk_schema(&toy(), "q?", "h", &heuristic(5), &template()).unwrap_err();
        assert!(matches!(err, Error::Budget(BudgetError::ScaffoldTooLarge { tokens: 8, max: 5 })));
    }

    fn described() -> DatabaseSchema {
        DatabaseSchema::new(
            "d",
            vec![TableDef::new(
                "t",
                vec![
                    ColumnDef::new("a", "INTEGER").described("first column", Some("1 = yes, 0 = no")),
                    ColumnDef::new("b", "TEXT").described("second column", Some("free text")),
                ],
            )],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn shedding_is_identity_when_within_budget() {
        let s = described();
        let blocks = vec![TableBlock::from_table(&s.tables[0])];
        let (out, report) = shed_descriptions(&s, &blocks, &heuristic(1000), &|x| x.to_string()).unwrap();
        assert_eq!(out, blocks);
        assert!(report.dropped.is_empty() && report.fits);
    }

    #[test]
    fn shedding_drops_exactly_one_value_line() {
        let s = described();
        let blocks = vec![TableBlock::from_table(&s.tables[0])];
        let full = render_blocks(&s, &blocks);
        // Budget in bytes just below the full rendering but above it minus the
        // last value-description line ("\n    values: free text" = 22 bytes).
        let full_len = full.len();
        let budget = heuristic((full_len - 1) / 4);
        assert!(full_len.div_ceil(4) > budget.max_tokens);
        assert!((full_len - 22).div_ceil(4) <= budget.max_tokens);
        let (out, report) = shed_descriptions(&s, &blocks, &budget, &|x| x.to_string()).unwrap();
        assert!(report.fits);
        assert_eq!(report.dropped.len(), 1);
        assert_eq!(report.dropped[0].kind, ShedKind::ValueDescription);
        assert_eq!(report.dropped[0].column, "b");
        assert_eq!(report.dropped[0].line, "    values: free text");
        let text = render_blocks(&s, &out);
        assert!(!text.contains("free text") && text.contains("1 = yes"));
    }

    #[test]
    fn shedding_floor_is_bare_schema() {
        let s = described();
        let blocks = vec![TableBlock::from_table(&s.tables[0])];
        let (out, report) = shed_descriptions(&s, &blocks, &heuristic(1), &|x| x.to_string()).unwrap();
        assert!(!report.fits);
        assert_eq!(report.dropped.len(), 4);
        assert_eq!(render_blocks(&s, &out), "Table t\n  a (INTEGER)\n  b (TEXT)");
    }

    #[test]
    fn oversized_table_sheds_then_splits() {
        let s = described();
        let t = Template::parse("{question}|{schema}").unwrap();
        // Bare table: "Table t\n  a (INTEGER)\n  b (TEXT)" is 32 bytes; with "q|" 34 bytes = 9 tokens.
        let chunks = chunk_schema(&s, "q", "", &heuristic(9), &t).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].shed.len(), 4);
        assert!(!chunks[0].has_column_split());
    }

    #[test]
    fn wide_table_is_split_by_columns() {
        let columns = (0..20).map(|i| ColumnDef::new(format!("c{i:02}"), "INTEGER")).collect();
        let s = DatabaseSchema::new("w", vec![TableDef::new("t", columns)], vec![]).unwrap();
        let t = Template::parse("{question}|{schema}").unwrap();
        // Partial header is 48 bytes, each column line 16 bytes (newline included):
        // 2 + 48 + 16k <= 200 bytes allows 9 columns per prompt.
        let chunks = chunk_schema(&s, "q", "", &heuristic(50), &t).unwrap();
        assert_eq!(chunks.len(), 3);
        assert!(chunks.iter().all(|c| c.token_count <= 50));
        let splits: Vec<&ColumnSplit> = chunks.iter().flat_map(|c| &c.column_splits).collect();
        assert_eq!(splits.iter().map(|s| s.columns.len()).collect::<Vec<_>>(), vec![9, 9, 2]);
        assert_eq!(splits.iter().map(|s| (s.part, s.parts)).collect::<Vec<_>>(), vec![(0, 3), (1, 3), (2, 3)]);
        assert!(chunks.iter().all(|c| c.text.contains("Table t (partial, columns split across prompts)")));

        let err = chunk_schema(&s, "q", "", &heuristic(15), &t).unwrap_err();
        assert!(matches!(err, Error::Budget(BudgetError::ColumnTooLarge { .. })));
    }
}
