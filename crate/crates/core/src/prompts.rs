//! Prompt rendering for every pipeline variant and supervised fine-tuning export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunker::{
    chunk_schema, count_tokens, shed_descriptions, PromptChunk, ShedItem, TableBlock, TokenBudget,
    DEFAULT_CHUNK_BUDGET,
};
use crate::corpus::{ident_eq, DatabaseSchema, Example, SchemaStore};
use crate::error::{Error, Result};
use crate::linkex::{serialize_link, SchemaLink};
use crate::template::Template;

/// Default budget for single-prompt (non-descriptive) schema linking.
pub const DEFAULT_ND_BUDGET: usize = 5000;
/// Default budget for SQL-stage prompts.
pub const DEFAULT_SQL_BUDGET: usize = 5000;
/// Share of examples held out for validation in SFT exports.
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    NonDescriptive,
    Chunked,
    Perfect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqlMode {
    Direct,
    Trusting,
    NonTrusting,
    NonTrustingLinkOnly,
}

impl SqlMode {
    pub fn uses_link(self) -> bool {
        self != SqlMode::Direct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PipelineVariant {
    pub link_mode: LinkMode,
    pub sql_mode: SqlMode,
}

impl PipelineVariant {
    pub fn new(link_mode: LinkMode, sql_mode: SqlMode) -> Result<Self> {
        let v = PipelineVariant { link_mode, sql_mode };
        v.validate()?;
        Ok(v)
    }

    /// Direct SQL prompts ignore links, so only the plain single-prompt
    /// variant may be combined with it.
    pub fn validate(&self) -> Result<()> {
        if self.sql_mode == SqlMode::Direct && self.link_mode != LinkMode::NonDescriptive {
            return Err(Error::Config(format!(
                "variant {self} is meaningless: direct SQL prompts do not use schema links"
            )));
        }
        Ok(())
    }

    /// Whether stage one (schema-link inference) runs.
    pub fn runs_link_stage(&self) -> bool {
        self.sql_mode.uses_link() && self.link_mode != LinkMode::Perfect
    }
}

impl fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let link = match self.link_mode {
            LinkMode::NonDescriptive => "non_descriptive",
            LinkMode::Chunked => "chunked",
            LinkMode::Perfect => "perfect",
        };
        let sql = match self.sql_mode {
            SqlMode::Direct => "direct",
            SqlMode::Trusting => "trusting",
            SqlMode::NonTrusting => "non_trusting",
            SqlMode::NonTrustingLinkOnly => "non_trusting_link_only",
        };
        write!(f, "{link}+{sql}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Link,
    Sql,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Link => "link",
            Stage::Sql => "sql",
        })
    }
}

/// A table shown in a chunk prompt. `columns` is set when only part of the
/// table's columns are shown; `first_part` marks the part that carries a
/// column-less use of the table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkTable {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub first_part: bool,
}

fn default_true() -> bool {
    true
}

/// The tables and columns a chunk prompt shows.
pub fn chunk_scope(chunk: &PromptChunk) -> Vec<ChunkTable> {
    let mut scope: Vec<ChunkTable> = Vec::new();
    for block in &chunk.blocks {
        if !block.partial {
            scope.push(ChunkTable { name: block.table.clone(), columns: None, first_part: true });
            continue;
        }
        let first_part = chunk
            .column_splits
            .iter()
            .any(|s| ident_eq(&s.table, &block.table) && s.part == 0);
        let columns = block.columns.iter().map(|c| c.name.clone());
        match scope.iter_mut().find(|t| ident_eq(&t.name, &block.table)) {
            Some(t) => t.columns.get_or_insert_with(Vec::new).extend(columns),
            None => scope.push(ChunkTable {
                name: block.table.clone(),
                columns: Some(columns.collect()),
                first_part,
            }),
        }
    }
    scope
}

/// The part of `link` a chunk with the given scope can see. Foreign keys
/// survive when both endpoint tables are in the result.
pub fn restrict_to_scope(link: &SchemaLink, scope: &[ChunkTable]) -> SchemaLink {
    let whole: Vec<&str> = scope
        .iter()
        .filter(|t| t.columns.is_none())
        .map(|t| t.name.as_str())
        .collect();
    let mut out = link.restrict_to_tables(&whole);
    for t in scope {
        if let Some(cols) = &t.columns {
            out.union_with(&link.restrict_to_columns(&t.name, cols, t.first_part));
        }
    }
    for fk in link.foreign_keys() {
        if out.contains_table(&fk.from_table) && out.contains_table(&fk.to_table) {
            out.add_foreign_key(fk.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub question_id: i64,
    pub db_id: String,
    pub variant: PipelineVariant,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_total: Option<usize>,
    /// Set on chunk prompts: what the chunk shows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Vec<ChunkTable>>,
    pub text: String,
    pub token_count: usize,
    pub template_hash: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shed: Vec<ShedItem>,
}

impl RenderedPrompt {
    /// SHA-256 of the prompt text, hex encoded.
    pub fn text_hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

/// The six prompt templates. Defaults ship with the crate.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub link_nd: Template,
    pub link_chunked: Template,
    pub sql_direct: Template,
    pub sql_trusting: Template,
    pub sql_non_trusting: Template,
    pub sql_non_trusting_link_only: Template,
}

/// Optional replacement template files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePaths {
    pub link_nd: Option<PathBuf>,
    pub link_chunked: Option<PathBuf>,
    pub sql_direct: Option<PathBuf>,
    pub sql_trusting: Option<PathBuf>,
    pub sql_non_trusting: Option<PathBuf>,
    pub sql_non_trusting_link_only: Option<PathBuf>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let parse = |src: &str| Template::parse(src).expect("built-in template parses");
        PromptTemplates {
            link_nd: parse(include_str!("../templates/link_nd.txt")),
            link_chunked: parse(include_str!("../templates/link_chunked.txt")),
            sql_direct: parse(include_str!("../templates/sql_direct.txt")),
            sql_trusting: parse(include_str!("../templates/sql_trusting.txt")),
            sql_non_trusting: parse(include_str!("../templates/sql_non_trusting.txt")),
            sql_non_trusting_link_only: parse(include_str!("../templates/sql_non_trusting_link_only.txt")),
        }
    }
}

impl PromptTemplates {
    pub fn load(paths: &TemplatePaths) -> Result<Self> {
        let mut t = PromptTemplates::default();
        let slots: [(&Option<PathBuf>, &mut Template); 6] = [
            (&paths.link_nd, &mut t.link_nd),
            (&paths.link_chunked, &mut t.link_chunked),
            (&paths.sql_direct, &mut t.sql_direct),
            (&paths.sql_trusting, &mut t.sql_trusting),
            (&paths.sql_non_trusting, &mut t.sql_non_trusting),
            (&paths.sql_non_trusting_link_only, &mut t.sql_non_trusting_link_only),
        ];
        for (path, slot) in slots {
            if let Some(path) = path {
                *slot = Template::load(path)?;
            }
        }
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        let required: [(&str, &Template, &[&str]); 6] = [
            ("link_nd", &self.link_nd, &["question", "schema"]),
            ("link_chunked", &self.link_chunked, &["question", "schema"]),
            ("sql_direct", &self.sql_direct, &["question", "schema"]),
            ("sql_trusting", &self.sql_trusting, &["question", "link"]),
            ("sql_non_trusting", &self.sql_non_trusting, &["question", "schema", "link"]),
            ("sql_non_trusting_link_only", &self.sql_non_trusting_link_only, &["question", "link"]),
        ];
        for (name, template, slots) in required {
            for slot in slots {
                if !template.has_slot(slot) {
                    return Err(Error::Template(format!("template {name} lacks the {{{slot}}} placeholder")));
                }
            }
        }
        Ok(())
    }

    pub fn link(&self, mode: LinkMode) -> &Template {
        match mode {
            LinkMode::Chunked => &self.link_chunked,
            LinkMode::NonDescriptive | LinkMode::Perfect => &self.link_nd,
        }
    }

    pub fn sql(&self, mode: SqlMode) -> &Template {
        match mode {
            SqlMode::Direct => &self.sql_direct,
            SqlMode::Trusting => &self.sql_trusting,
            SqlMode::NonTrusting => &self.sql_non_trusting,
            SqlMode::NonTrustingLinkOnly => &self.sql_non_trusting_link_only,
        }
    }

    /// Hash per template name, for run manifests.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        [
            ("link_nd", &self.link_nd),
            ("link_chunked", &self.link_chunked),
            ("sql_direct", &self.sql_direct),
            ("sql_trusting", &self.sql_trusting),
            ("sql_non_trusting", &self.sql_non_trusting),
            ("sql_non_trusting_link_only", &self.sql_non_trusting_link_only),
        ]
        .into_iter()
        .map(|(k, t)| (k.to_string(), t.hash()))
        .collect()
    }
}

/// Token budgets per prompt kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBudgets {
    pub link_nd: TokenBudget,
    pub link_chunked: TokenBudget,
    pub sql: TokenBudget,
}

impl Default for StageBudgets {
    fn default() -> Self {
        let b = |n| TokenBudget::new(n).expect("positive default");
        StageBudgets {
            link_nd: b(DEFAULT_ND_BUDGET),
            link_chunked: b(DEFAULT_CHUNK_BUDGET),
            sql: b(DEFAULT_SQL_BUDGET),
        }
    }
}

fn all_blocks(schema: &DatabaseSchema) -> Vec<TableBlock> {
    schema.tables.iter().map(TableBlock::from_table).collect()
}

/// Renders `template` around the whole schema, shedding descriptions as
/// needed. Fails when even the bare schema is over budget.
fn render_with_schema(
    schema: &DatabaseSchema,
    budget: &TokenBudget,
    fill: &dyn Fn(&str) -> String,
) -> Result<(String, usize, Vec<ShedItem>)> {
    let (blocks, report) = shed_descriptions(schema, &all_blocks(schema), budget, fill)?;
    if !report.fits {
        return Err(crate::chunker::BudgetError::OverBudget {
            tokens: report.token_count,
            max: budget.max_tokens,
        }
        .into());
    }
    let text = fill(&crate::chunker::render_blocks(schema, &blocks));
    Ok((text, report.token_count, report.dropped))
}

/// Single link prompt with the whole schema and as many descriptions as fit.
pub fn build_link_prompt_nd(
    schema: &DatabaseSchema,
    example: &Example,
    variant: PipelineVariant,
    budget: &TokenBudget,
    template: &Template,
) -> Result<RenderedPrompt> {
    let fill = |s: &str| template.render(&[("question", &example.question), ("hint", example.hint()), ("schema", s)]);
    let (text, token_count, shed) = render_with_schema(schema, budget, &fill)?;
    Ok(RenderedPrompt {
        question_id: example.question_id,
        db_id: example.db_id.clone(),
        variant,
        stage: Stage::Link,
        chunk_index: None,
        chunk_total: None,
        scope: None,
        text,
        token_count,
        template_hash: template.hash(),
        shed,
    })
}

/// One link prompt per schema chunk.
pub fn build_link_prompts_chunked(
    schema: &DatabaseSchema,
    example: &Example,
    variant: PipelineVariant,
    budget: &TokenBudget,
    template: &Template,
) -> Result<Vec<RenderedPrompt>> {
    let chunks = chunk_schema(schema, &example.question, example.hint(), budget, template)?;
    Ok(chunks
        .into_iter()
        .map(|chunk| RenderedPrompt {
            question_id: example.question_id,
            db_id: example.db_id.clone(),
            variant,
            stage: Stage::Link,
            chunk_index: Some(chunk.index),
            chunk_total: Some(chunk.total),
            scope: Some(chunk_scope(&chunk)),
            token_count: chunk.token_count,
            template_hash: template.hash(),
            shed: chunk.shed,
            text: chunk.text,
        })
        .collect())
}

/// Stage-one prompts for a variant: one ND prompt or one per chunk.
pub fn build_link_prompts(
    schema: &DatabaseSchema,
    example: &Example,
    variant: PipelineVariant,
    budgets: &StageBudgets,
    templates: &PromptTemplates,
) -> Result<Vec<RenderedPrompt>> {
    match variant.link_mode {
        LinkMode::Chunked => {
            build_link_prompts_chunked(schema, example, variant, &budgets.link_chunked, &templates.link_chunked)
        }
        LinkMode::NonDescriptive | LinkMode::Perfect => {
            build_link_prompt_nd(schema, example, variant, &budgets.link_nd, &templates.link_nd).map(|p| vec![p])
        }
    }
}

/// SQL-stage prompt. The link is ignored in direct mode.
pub fn build_sql_prompt(
    variant: PipelineVariant,
    schema: &DatabaseSchema,
    link: &SchemaLink,
    example: &Example,
    budget: &TokenBudget,
    templates: &PromptTemplates,
) -> Result<RenderedPrompt> {
    let template = templates.sql(variant.sql_mode);
    let link_text = serialize_link(link);
    let base = [("question", example.question.as_str()), ("hint", example.hint()), ("link", link_text.as_str())];
    let (text, token_count, shed) = match variant.sql_mode {
        SqlMode::Direct | SqlMode::NonTrusting => {
            let fill = |s: &str| {
                let mut vars = base.to_vec();
                vars.push(("schema", s));
                template.render(&vars)
            };
            render_with_schema(schema, budget, &fill)?
        }
        SqlMode::Trusting | SqlMode::NonTrustingLinkOnly => {
            let text = template.render(&base);
            let tokens = count_tokens(&text, budget)?;
            if tokens > budget.max_tokens {
                return Err(crate::chunker::BudgetError::OverBudget { tokens, max: budget.max_tokens }.into());
            }
            (text, tokens, Vec::new())
        }
    };
    Ok(RenderedPrompt {
        question_id: example.question_id,
        db_id: example.db_id.clone(),
        variant,
        stage: Stage::Sql,
        chunk_index: None,
        chunk_total: None,
        scope: None,
        text,
        token_count,
        template_hash: template.hash(),
        shed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// Seeded random hold-out: `round(n * fraction)` ids go to validation.
pub fn split_ids(ids: &[i64], fraction: f64, seed: u64) -> BTreeSet<i64> {
    let mut shuffled: Vec<i64> = ids.to_vec();
    shuffled.sort_unstable();
    shuffled.dedup();
    let n_val = (shuffled.len() as f64 * fraction.clamp(0.0, 1.0)).round() as usize;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    shuffled.into_iter().take(n_val).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub question_id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_index: Option<usize>,
    pub prompt: String,
    pub completion: String,
    pub template_hash: String,
    pub variant: PipelineVariant,
    pub stage: Stage,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedExample {
    pub question_id: i64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub emitted: usize,
    pub train_examples: usize,
    pub validation_examples: usize,
    pub skipped: Vec<SkippedExample>,
    pub template_hash: String,
}

/// Inputs for an SFT export. Link-stage and trusting SQL exports use
/// `gold_links`; non-trusting SQL exports need `predicted_links`.
pub struct SftExport<'a> {
    pub examples: &'a [Example],
    pub schemas: &'a SchemaStore,
    pub variant: PipelineVariant,
    pub stage: Stage,
    pub gold_links: Option<&'a BTreeMap<i64, SchemaLink>>,
    pub predicted_links: Option<&'a BTreeMap<i64, SchemaLink>>,
    pub budgets: &'a StageBudgets,
    pub templates: &'a PromptTemplates,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SftExport<'_> {
    fn links(&self) -> Result<Option<&BTreeMap<i64, SchemaLink>>> {
        fn need<'m>(links: Option<&'m BTreeMap<i64, SchemaLink>>, what: &str) -> Result<Option<&'m BTreeMap<i64, SchemaLink>>> {
            links.map(Some).ok_or_else(|| Error::Config(format!("{what} links are required for this export")))
        }
        match (self.stage, self.variant.sql_mode) {
            (Stage::Link, _) => need(self.gold_links, "gold"),
            (Stage::Sql, SqlMode::Direct) => Ok(None),
            (Stage::Sql, SqlMode::Trusting) => need(self.gold_links, "gold"),
            (Stage::Sql, SqlMode::NonTrusting | SqlMode::NonTrustingLinkOnly) => {
                need(self.predicted_links, "predicted")
            }
        }
    }

    fn records_for(&self, ex: &Example, links: Option<&BTreeMap<i64, SchemaLink>>) -> Result<Vec<(Option<usize>, String, String)>> {
        let schema = self.schemas.get(&ex.db_id)?;
        let link = match links {
            Some(map) => Some(
                map.get(&ex.question_id)
                    .ok_or_else(|| Error::Validation("no schema link for this example".into()))?,
            ),
            None => None,
        };
        match self.stage {
            Stage::Link => {
                let link = link.expect("link stage requires links");
                let prompts = build_link_prompts(&schema, ex, self.variant, self.budgets, self.templates)?;
                Ok(prompts
                    .into_iter()
                    .map(|p| {
                        let completion = match &p.scope {
                            Some(scope) => serialize_link(&restrict_to_scope(link, scope)),
                            None => serialize_link(link),
                        };
                        (p.chunk_index, p.text, completion)
                    })
                    .collect())
            }
            Stage::Sql => {
                let empty = SchemaLink::new();
                let p = build_sql_prompt(self.variant, &schema, link.unwrap_or(&empty), ex, &self.budgets.sql, self.templates)?;
                Ok(vec![(None, p.text, ex.gold_sql.clone())])
            }
        }
    }
}

/// Writes JSON Lines SFT records to `out`. Examples that cannot be rendered
/// (over budget, missing link, unreadable schema) are skipped and reported.
pub fn export_sft(req: &SftExport<'_>, out: &Path) -> Result<ExportReport> {
    req.variant.validate()?;
    let links = req.links()?;
    let template = match req.stage {
        Stage::Link => req.templates.link(req.variant.link_mode),
        Stage::Sql => req.templates.sql(req.variant.sql_mode),
    };
    let ids: Vec<i64> = req.examples.iter().map(|e| e.question_id).collect();
    let validation = split_ids(&ids, req.validation_fraction, req.seed);

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let mut report = ExportReport { template_hash: template.hash(), ..Default::default() };
    let mut counted = BTreeSet::new();

    for ex in req.examples {
        let records = match req.records_for(ex, links) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping question {} in SFT export: {e}", ex.question_id);
                report.skipped.push(SkippedExample { question_id: ex.question_id, reason: e.to_string() });
                continue;
            }
        };
        let split = if validation.contains(&ex.question_id) { Split::Validation } else { Split::Train };
        if counted.insert(ex.question_id) {
            match split {
                Split::Train => report.train_examples += 1,
                Split::Validation => report.validation_examples += 1,
            }
        }
        for (chunk_index, prompt, completion) in records {
            let rec = SftRecord {
                question_id: ex.question_id,
                chunk_index,
                prompt,
                completion,
                template_hash: report.template_hash.clone(),
                variant: req.variant,
                stage: req.stage,
                split,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(out, e))?;
            report.emitted += 1;
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(report)
}
