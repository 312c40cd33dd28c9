//! Subcommand implementations. Every command reads a [`RunConfig`] and writes
//! its artifacts under the configured output directory.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::chunker::{chunk_schema, ChunkDumpRecord};
use crate::config::RunConfig;
use crate::corpus::{load_examples, Example, SchemaStore};
use crate::error::{Error, Result};
use crate::evalx::{evaluate, link_metrics, render_table, EvalReport};
use crate::infer::{make_backend, run_stage, BackendContext, Completion};
use crate::linkex::{build_gold_links, serialize_link, ExtractionFailure, GoldLinkRecord, SchemaLink};
use crate::postproc::{clean_sql, merge_links, parse_link_response, validate_link, Extraction, LinkValidation, Prediction};
use crate::prompts::{
    build_link_prompts, build_sql_prompt, export_sft, ExportReport, LinkMode, PromptTemplates, RenderedPrompt,
    SftExport, Stage,
};

pub const GOLD_LINKS_FILE: &str = "gold_links.jsonl";
pub const EXTRACTION_FAILURES_FILE: &str = "extraction_failures.jsonl";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const LINK_PROMPTS_FILE: &str = "link_prompts.jsonl";
pub const LINK_COMPLETIONS_FILE: &str = "link_completions.jsonl";
pub const LINKS_FILE: &str = "links.jsonl";
pub const SQL_PROMPTS_FILE: &str = "sql_prompts.jsonl";
pub const SQL_COMPLETIONS_FILE: &str = "sql_completions.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const EVAL_TABLE_FILE: &str = "eval_report.txt";
pub const EVAL_TIMINGS_FILE: &str = "eval_timings.jsonl";
pub const LINK_METRICS_FILE: &str = "link_metrics.json";

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            record: Some(i),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct LinkLineRecord {
    question_id: i64,
    link: String,
}

/// Reads any JSON Lines file whose records carry `question_id` and a
/// serialized `link` (gold-link files and run `links.jsonl` both qualify).
pub fn load_links(path: &Path) -> Result<BTreeMap<i64, SchemaLink>> {
    let records: Vec<LinkLineRecord> = read_jsonl(path)?;
    let none: &[&str] = &[];
    Ok(records
        .into_iter()
        .map(|r| (r.question_id, parse_link_response(&r.link, none).link))
        .collect())
}

/// Examples, schemas and templates shared by the subcommands.
pub struct Workspace {
    pub config: RunConfig,
    pub examples: Vec<Example>,
    pub schemas: SchemaStore,
    pub templates: PromptTemplates,
}

impl Workspace {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut examples = load_examples(&config.corpus.examples)?;
        if let Some(n) = config.run.limit {
            examples.truncate(n);
        }
        let fields = config.corpus.description_columns.clone().unwrap_or_default();
        let schemas = SchemaStore::new(&config.corpus.db_root, fields);
        schemas.check_available(examples.iter().map(|e| e.db_id.as_str()))?;
        let templates = PromptTemplates::load(&config.templates)?;
        Ok(Workspace { config, examples, schemas, templates })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.config.run.output_dir.join(name)
    }

    /// Gold links from the configured file, or extracted now.
    pub fn gold_links(&self) -> Result<BTreeMap<i64, SchemaLink>> {
        match &self.config.corpus.gold_links {
            Some(path) => load_links(path),
            None => {
                let gold = build_gold_links(&self.examples, &self.schemas);
                for f in &gold.failures {
                    log::warn!("no gold link for question {}: {}", f.question_id, f.reason);
                }
                Ok(gold.links)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub extracted: usize,
    pub failed: usize,
    pub failure_rate: f64,
}

pub fn cmd_extract_links(ws: &Workspace) -> Result<ExtractSummary> {
    let gold = build_gold_links(&ws.examples, &ws.schemas);
    let db_of: BTreeMap<i64, &str> = ws.examples.iter().map(|e| (e.question_id, e.db_id.as_str())).collect();
    let records: Vec<GoldLinkRecord> = gold
        .links
        .iter()
        .map(|(qid, link)| GoldLinkRecord::new(*qid, db_of[qid], link))
        .collect();
    let mut failures: Vec<&ExtractionFailure> = gold.failures.iter().collect();
    failures.sort_by_key(|f| f.question_id);
    write_jsonl(&ws.out(GOLD_LINKS_FILE), &records)?;
    write_jsonl(&ws.out(EXTRACTION_FAILURES_FILE), failures)?;
    Ok(ExtractSummary {
        extracted: gold.links.len(),
        failed: gold.failures.len(),
        failure_rate: gold.failure_rate(),
    })
}

#[derive(Debug, Clone, Serialize)]
struct ChunkFailure {
    question_id: i64,
    error: String,
}

/// Dumps chunked link-stage schema renderings for inspection.
pub fn cmd_chunk(ws: &Workspace) -> Result<usize> {
    let budgets = ws.config.budgets.stage_budgets()?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ex in &ws.examples {
        let schema = ws.schemas.get(&ex.db_id)?;
        match chunk_schema(&schema, &ex.question, ex.hint(), &budgets.link_chunked, &ws.templates.link_chunked) {
            Ok(chunks) => records.extend(chunks.iter().map(|c| ChunkDumpRecord::new(ex.question_id, c))),
            Err(e) => failures.push(ChunkFailure { question_id: ex.question_id, error: e.to_string() }),
        }
    }
    write_jsonl(&ws.out(CHUNKS_FILE), &records)?;
    if !failures.is_empty() {
        write_jsonl(&ws.out("chunk_failures.jsonl"), &failures)?;
    }
    Ok(records.len())
}

/// Stage-one outcome per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub question_id: i64,
    /// Serialized link handed to the SQL stage.
    pub link: String,
    /// Union of the per-chunk answers before validation.
    pub merged: String,
    pub chunks: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged_lines: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<LinkValidation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: String,
    pub seed: u64,
    pub link_backend: Option<String>,
    pub sql_backend: String,
    pub templates: BTreeMap<String, String>,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub examples: usize,
    pub link_prompts: usize,
    pub sql_prompts: usize,
    pub failed_examples: usize,
}

struct StageOne {
    links: BTreeMap<i64, (SchemaLink, Option<LinkValidation>)>,
    errors: BTreeMap<i64, String>,
    prompts: usize,
}

fn run_link_stage(ws: &Workspace, gold: Option<&BTreeMap<i64, SchemaLink>>) -> Result<StageOne> {
    let cfg = &ws.config;
    let budgets = cfg.budgets.stage_budgets()?;
    let mut prompts: Vec<RenderedPrompt> = Vec::new();
    let mut errors = BTreeMap::new();
    for ex in &ws.examples {
        let schema = ws.schemas.get(&ex.db_id)?;
        match build_link_prompts(&schema, ex, cfg.variant, &budgets, &ws.templates) {
            Ok(ps) => prompts.extend(ps),
            Err(e) => {
                log::warn!("question {}: no link prompt: {e}", ex.question_id);
                errors.insert(ex.question_id, format!("link prompt: {e}"));
            }
        }
    }
    write_jsonl(&ws.out(LINK_PROMPTS_FILE), &prompts)?;

    let backend_cfg = cfg.backend.link.as_ref().expect("validated");
    let ctx = BackendContext { examples: &ws.examples, gold_links: gold };
    let backend = make_backend(backend_cfg, &ctx)?;
    let completions = run_stage(&prompts, backend.as_ref(), cfg.run.parallelism)?;
    write_jsonl(&ws.out(LINK_COMPLETIONS_FILE), &completions)?;

    let mut grouped: BTreeMap<i64, Vec<(&RenderedPrompt, &Completion)>> = BTreeMap::new();
    for (p, c) in prompts.iter().zip(&completions) {
        grouped.entry(p.question_id).or_default().push((p, c));
    }

    let mut links = BTreeMap::new();
    let mut records = Vec::new();
    for ex in &ws.examples {
        let Some(parts) = grouped.get(&ex.question_id) else { continue };
        let schema = ws.schemas.get(&ex.db_id)?;
        let mut flagged = Vec::new();
        let mut errs = Vec::new();
        let parsed: Vec<SchemaLink> = parts
            .iter()
            .map(|(p, c)| {
                if let Some(e) = &c.error {
                    errs.push(e.clone());
                }
                let tables: Vec<String> = p
                    .scope
                    .as_ref()
                    .map(|s| s.iter().map(|t| t.name.clone()).collect())
                    .unwrap_or_default();
                let r = parse_link_response(&c.raw_text, &tables);
                flagged.extend(r.flagged.into_iter().map(|f| f.line));
                r.link
            })
            .collect();
        let merged = merge_links(&parsed);
        let (mut link, validation) = if cfg.run.repair_links {
            let v = validate_link(&merged, &schema);
            (v.accepted.clone(), Some(v))
        } else {
            (merged.clone(), None)
        };
        if cfg.variant.link_mode == LinkMode::Chunked {
            link.complete_foreign_keys(&schema);
        }
        records.push(LinkRecord {
            question_id: ex.question_id,
            link: serialize_link(&link),
            merged: serialize_link(&merged),
            chunks: parts.len(),
            flagged_lines: flagged,
            validation: validation.clone(),
            errors: errs,
        });
        links.insert(ex.question_id, (link, validation));
    }
    write_jsonl(&ws.out(LINKS_FILE), &records)?;
    Ok(StageOne { links, errors, prompts: prompts.len() })
}

fn failed_prediction(question_id: i64, link: Option<String>, error: String) -> Prediction {
    Prediction {
        question_id,
        sql: String::new(),
        extraction: Extraction::Failed,
        link,
        validation_report: None,
        error: Some(error),
    }
}

/// Runs the configured pipeline end to end and writes every artifact.
pub fn cmd_run(ws: &Workspace) -> Result<RunSummary> {
    let cfg = &ws.config;
    cfg.validate_for_run()?;
    let out_dir = &cfg.run.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&ws.out(RESOLVED_CONFIG_FILE), &cfg.to_toml())?;

    let sql_backend_cfg = cfg.backend.sql.as_ref().expect("validated");
    let manifest = Manifest {
        variant: cfg.variant.to_string(),
        seed: cfg.run.seed,
        link_backend: cfg.variant.runs_link_stage().then(|| {
            format!("{:?}", cfg.backend.link.as_ref().expect("validated").kind)
        }),
        sql_backend: format!("{:?}", sql_backend_cfg.kind),
        templates: ws.templates.hashes(),
        examples: ws.examples.len(),
    };
    write_text(&ws.out(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;

    let needs_gold = cfg.variant.link_mode == LinkMode::Perfect
        || [&cfg.backend.link, &cfg.backend.sql]
            .into_iter()
            .flatten()
            .any(|b| b.kind == crate::infer::BackendKind::OracleLinks);
    let gold = if needs_gold { Some(ws.gold_links()?) } else { None };

    let mut errors: BTreeMap<i64, String> = BTreeMap::new();
    let mut links: BTreeMap<i64, (SchemaLink, Option<LinkValidation>)> = BTreeMap::new();
    let mut link_prompts = 0;
    if cfg.variant.runs_link_stage() {
        let one = run_link_stage(ws, gold.as_ref())?;
        links = one.links;
        errors.extend(one.errors);
        link_prompts = one.prompts;
    } else if cfg.variant.sql_mode.uses_link() {
        let gold = gold.as_ref().expect("perfect links need gold");
        for ex in &ws.examples {
            match gold.get(&ex.question_id) {
                Some(l) => {
                    links.insert(ex.question_id, (l.clone(), None));
                }
                None => {
                    errors.insert(ex.question_id, "no gold link for this example".into());
                }
            }
        }
    }

    let budgets = cfg.budgets.stage_budgets()?;
    let empty = SchemaLink::new();
    let mut sql_prompts = Vec::new();
    for ex in &ws.examples {
        if errors.contains_key(&ex.question_id) {
            continue;
        }
        let schema = ws.schemas.get(&ex.db_id)?;
        let link = links.get(&ex.question_id).map_or(&empty, |(l, _)| l);
        match build_sql_prompt(cfg.variant, &schema, link, ex, &budgets.sql, &ws.templates) {
            Ok(p) => sql_prompts.push(p),
            Err(e) => {
                log::warn!("question {}: no SQL prompt: {e}", ex.question_id);
                errors.insert(ex.question_id, format!("sql prompt: {e}"));
            }
        }
    }
    write_jsonl(&ws.out(SQL_PROMPTS_FILE), &sql_prompts)?;

    let ctx = BackendContext { examples: &ws.examples, gold_links: gold.as_ref() };
    let backend = make_backend(sql_backend_cfg, &ctx)?;
    let completions = run_stage(&sql_prompts, backend.as_ref(), cfg.run.parallelism)?;
    write_jsonl(&ws.out(SQL_COMPLETIONS_FILE), &completions)?;

    let by_id: BTreeMap<i64, &Completion> = completions.iter().map(|c| (c.question_id, c)).collect();
    let uses_link = cfg.variant.sql_mode.uses_link();
    let predictions: Vec<Prediction> = ws
        .examples
        .iter()
        .map(|ex| {
            let link_text = links
                .get(&ex.question_id)
                .filter(|_| uses_link)
                .map(|(l, _)| serialize_link(l));
            let validation = links.get(&ex.question_id).and_then(|(_, v)| v.clone());
            if let Some(e) = errors.get(&ex.question_id) {
                return failed_prediction(ex.question_id, link_text, e.clone());
            }
            let c = by_id[&ex.question_id];
            let cleaned = clean_sql(&c.raw_text);
            Prediction {
                question_id: ex.question_id,
                sql: cleaned.sql,
                extraction: cleaned.extraction,
                link: link_text,
                validation_report: validation,
                error: c.error.clone(),
            }
        })
        .collect();
    write_jsonl(&ws.out(PREDICTIONS_FILE), &predictions)?;

    Ok(RunSummary {
        examples: ws.examples.len(),
        link_prompts,
        sql_prompts: sql_prompts.len(),
        failed_examples: predictions.iter().filter(|p| p.extraction == Extraction::Failed).count(),
    })
}

#[derive(Serialize)]
struct Timing {
    question_id: i64,
    wall_time_ms: f64,
}

/// Scores a predictions file and writes the JSON report, the results table,
/// per-example timings and, when predictions carry links, link metrics.
pub fn cmd_eval(ws: &Workspace, predictions_path: &Path, label: &str) -> Result<EvalReport> {
    let predictions: Vec<Prediction> = read_jsonl(predictions_path)?;
    let root = ws.schemas.root().to_path_buf();
    let db_path = move |db_id: &str| root.join(db_id).join(format!("{db_id}.sqlite"));
    let report = evaluate(&ws.examples, &predictions, &db_path, ws.config.timeout(), ws.config.run.parallelism)?;
    write_text(&ws.out(EVAL_REPORT_FILE), &report.to_json())?;
    write_text(&ws.out(EVAL_TABLE_FILE), &(render_table(&[(label.to_string(), report.clone())]) + "\n"))?;
    write_jsonl(
        &ws.out(EVAL_TIMINGS_FILE),
        report.outcomes.iter().map(|o| Timing {
            question_id: o.question_id,
            wall_time_ms: o.wall_time.as_secs_f64() * 1000.0,
        }),
    )?;
    let none: &[&str] = &[];
    let predicted: BTreeMap<i64, SchemaLink> = predictions
        .iter()
        .filter_map(|p| p.link.as_ref().map(|l| (p.question_id, parse_link_response(l, none).link)))
        .collect();
    if !predicted.is_empty() {
        let gold = ws.gold_links()?;
        let metrics = link_metrics(&predicted, &gold);
        write_text(&ws.out(LINK_METRICS_FILE), &serde_json::to_string_pretty(&metrics).expect("metrics serialize"))?;
    }
    Ok(report)
}

pub fn cmd_export_sft(ws: &Workspace, stage: Stage, out: &Path) -> Result<ExportReport> {
    let cfg = &ws.config;
    let budgets = cfg.budgets.stage_budgets()?;
    let gold = ws.gold_links()?;
    let predicted = match &cfg.corpus.predicted_links {
        Some(p) => Some(load_links(p)?),
        None => None,
    };
    let req = SftExport {
        examples: &ws.examples,
        schemas: &ws.schemas,
        variant: cfg.variant,
        stage,
        gold_links: Some(&gold),
        predicted_links: predicted.as_ref(),
        budgets: &budgets,
        templates: &ws.templates,
        validation_fraction: cfg.run.validation_fraction,
        seed: cfg.run.seed,
    };
    let report = export_sft(&req, out)?;
    let report_path = out.with_extension("report.json");
    write_text(&report_path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

/// Renders a results table from saved JSON reports, one row per label.
pub fn cmd_report(inputs: &[(String, PathBuf)]) -> Result<String> {
    let rows = inputs
        .iter()
        .map(|(label, path)| {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.clone(),
                record: None,
                message: e.to_string(),
            })?;
            Ok((label.clone(), report))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(render_table(&rows))
}
