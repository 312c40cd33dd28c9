use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use linksql::chunker::{chunk_schema, render_blocks, ColumnBlock, PromptChunk, TableBlock, TokenBudget};
use linksql::config::BudgetConfig;
use linksql::corpus::{ident_eq, DatabaseSchema, Difficulty, Example};
use linksql::evalx::{self, EvalReport, Status};
use linksql::linkex::{extract_links, serialize_link, SchemaLink};
use linksql::pipeline::{self, Workspace};
use linksql::postproc::{merge_links, parse_link_response, Extraction, Prediction};
use linksql::prompts::{chunk_scope, restrict_to_scope, split_ids, LinkMode, PromptTemplates};
use linksql::Error;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use super::{load_fixture, strategies, variant_toml, Corpus, OracleEntry};

pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(passed: bool, detail: impl Into<String>) -> Check {
        Check { passed, detail: detail.into() }
    }
}

/// Independent token count used to re-measure prompts.
pub fn heuristic_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

fn with_column(blocks: &[TableBlock], table: &str, column: ColumnBlock) -> Vec<TableBlock> {
    let mut out = blocks.to_vec();
    match out.last_mut() {
        Some(last) if last.partial && ident_eq(&last.table, table) => last.columns.push(column),
        _ => out.push(TableBlock { table: table.to_string(), columns: vec![column], partial: true }),
    }
    out
}

/// Checks every chunking invariant for one schema, question and budget.
/// Budget errors are accepted only when they are genuine.
pub fn check_chunking(schema: &DatabaseSchema, question: &str, hint: &str, max_tokens: usize) -> Result<(), String> {
    let template = PromptTemplates::default().link(LinkMode::Chunked).clone();
    let wrap = |s: &str| template.render(&[("question", question), ("hint", hint), ("schema", s)]);
    let budget = TokenBudget::new(max_tokens).map_err(|e| e.to_string())?;
    let chunks = match chunk_schema(schema, question, hint, &budget, &template) {
        Ok(c) => c,
        Err(Error::Budget(e)) => {
            use linksql::chunker::BudgetError::*;
            return match e {
                ScaffoldTooLarge { .. } => {
                    if heuristic_tokens(&wrap("")) > max_tokens {
                        Ok(())
                    } else {
                        Err(format!("spurious {e}"))
                    }
                }
                ColumnTooLarge { ref table, ref column, .. } => {
                    let def = schema.table(table).ok_or("unknown table in error")?;
                    let mut block = TableBlock::from_table(def);
                    block.columns.retain(|c| ident_eq(&c.name, column));
                    block.partial = true;
                    for c in &mut block.columns {
                        c.description = None;
                        c.values = None;
                    }
                    if heuristic_tokens(&wrap(&render_blocks(schema, &[block]))) > max_tokens {
                        Ok(())
                    } else {
                        Err(format!("spurious {e}"))
                    }
                }
                OverBudget { .. } => Err(format!("unexpected {e}")),
            };
        }
        Err(e) => return Err(e.to_string()),
    };
    if chunks.is_empty() {
        return Err("no chunks".into());
    }

    for c in &chunks {
        let measured = heuristic_tokens(&c.text);
        if measured > max_tokens {
            return Err(format!("chunk {} has {measured} tokens > {max_tokens}", c.index));
        }
        if measured != c.token_count {
            return Err(format!("chunk {} reports {} tokens, measured {measured}", c.index, c.token_count));
        }
        if !c.text.contains(question) || !c.text.contains(hint) {
            return Err(format!("chunk {} lost the question or hint", c.index));
        }
        if c.text != wrap(&render_blocks(schema, &c.blocks)) {
            return Err(format!("chunk {} text does not match its blocks", c.index));
        }
        if c.total != chunks.len() {
            return Err("inconsistent chunk total".into());
        }
    }

    for table in &schema.tables {
        let blocks: Vec<&TableBlock> =
            chunks.iter().flat_map(|c| &c.blocks).filter(|b| ident_eq(&b.table, &table.name)).collect();
        let shown: Vec<&str> = blocks.iter().flat_map(|b| b.columns.iter().map(|c| c.name.as_str())).collect();
        let expected: Vec<&str> = table.columns.iter().map(|c| c.name.as_str()).collect();
        if shown != expected {
            return Err(format!("table {} columns shown {:?}, expected {:?}", table.name, shown, expected));
        }
        let split = blocks.iter().any(|b| b.partial);
        if !split && blocks.len() != 1 {
            return Err(format!("table {} shown {} times", table.name, blocks.len()));
        }
        if split && blocks.iter().any(|b| !b.partial) {
            return Err(format!("table {} mixes full and partial blocks", table.name));
        }
    }
    let order: Vec<&str> = chunks.iter().flat_map(|c| &c.blocks).map(|b| b.table.as_str()).collect();
    let mut catalog = schema.tables.iter().map(|t| t.name.as_str());
    let mut cur = catalog.next();
    for name in &order {
        while cur.is_some_and(|c| !ident_eq(c, name)) {
            cur = catalog.next();
        }
        if cur.is_none() {
            return Err("tables out of catalog order".into());
        }
    }

    for pair in chunks.windows(2) {
        let (a, b): (&PromptChunk, &PromptChunk) = (&pair[0], &pair[1]);
        let first = &b.blocks[0];
        let candidate = if first.partial {
            with_column(&a.blocks, &first.table, first.columns[0].clone())
        } else {
            let mut v = a.blocks.clone();
            v.push(first.clone());
            v
        };
        if heuristic_tokens(&wrap(&render_blocks(schema, &candidate))) <= max_tokens {
            return Err(format!("chunk {} could have taken the first unit of chunk {}", a.index, b.index));
        }
    }
    Ok(())
}

fn run_property<S: proptest::strategy::Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

pub fn c1_link_oracle() -> Check {
    let corpus = Corpus::new();
    let schemas = corpus.schemas();
    let entries: Vec<OracleEntry> = load_fixture("link_oracle.json");
    let start = Instant::now();
    let mut failures = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let schema = schemas.get(&e.db_id).expect("fixture schema");
        match extract_links(&e.sql, &schema) {
            Ok(link) if serialize_link(&link) == e.link => {}
            Ok(link) => failures.push(format!("#{i}: got {:?}", serialize_link(&link))),
            Err(err) => failures.push(format!("#{i}: {err}")),
        }
    }
    let elapsed = start.elapsed();
    let ok = entries.len() - failures.len();
    Check::new(
        failures.is_empty() && entries.len() == 40 && elapsed < Duration::from_secs(1),
        format!("{ok}/{} exact in {:.3}s{}", entries.len(), elapsed.as_secs_f64(), fail_list(&failures)),
    )
}

fn fail_list(failures: &[String]) -> String {
    if failures.is_empty() {
        String::new()
    } else {
        format!("; {}", failures.join("; "))
    }
}

/// Creates the schema's tables (empty, no constraints) in memory, leaving
/// out one column, and reports whether `sql` prepares and runs.
pub fn executes_without(schema: &DatabaseSchema, dropped: Option<(&str, &str)>, sql: &str) -> bool {
    let conn = rusqlite::Connection::open_in_memory().expect("in-memory db");
    for t in &schema.tables {
        let cols: Vec<String> = t
            .columns
            .iter()
            .filter(|c| !dropped.is_some_and(|(dt, dc)| ident_eq(dt, &t.name) && ident_eq(dc, &c.name)))
            .map(|c| format!("\"{}\" {}", c.name.replace('"', "\"\""), c.sql_type))
            .collect();
        let cols = if cols.is_empty() { vec!["\"_placeholder\" INTEGER".to_string()] } else { cols };
        conn.execute_batch(&format!("CREATE TABLE \"{}\" ({});", t.name, cols.join(", ")))
            .expect("create table copy");
    }
    let Ok(mut stmt) = conn.prepare(sql) else { return false };
    let Ok(mut rows) = stmt.query([]) else { return false };
    loop {
        match rows.next() {
            Ok(Some(_)) => continue,
            Ok(None) => return true,
            Err(_) => return false,
        }
    }
}

pub fn c2_drop_column() -> Check {
    let corpus = Corpus::new();
    let schemas = corpus.schemas();
    let entries: Vec<OracleEntry> = load_fixture("drop_column.json");
    let mut passed = 0;
    let mut failures = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let schema = schemas.get(&e.db_id).expect("fixture schema");
        let link = match extract_links(&e.sql, &schema) {
            Ok(l) => l,
            Err(err) => {
                failures.push(format!("#{i}: {err}"));
                continue;
            }
        };
        let mut bad = Vec::new();
        if !executes_without(&schema, None, &e.sql) {
            bad.push("does not execute on the intact copy".to_string());
        }
        for t in &schema.tables {
            for c in &t.columns {
                let reported = link.contains_column(&t.name, &c.name);
                let runs = executes_without(&schema, Some((&t.name, &c.name)), &e.sql);
                if reported == runs {
                    bad.push(format!(
                        "{}.{} {}",
                        t.name,
                        c.name,
                        if reported { "reported but not needed" } else { "needed but not reported" }
                    ));
                }
            }
        }
        if bad.is_empty() {
            passed += 1;
        } else {
            failures.push(format!("#{i}: {}", bad.join(", ")));
        }
    }
    Check::new(
        passed == 10 && entries.len() == 10,
        format!("{passed}/{} queries consistent{}", entries.len(), fail_list(&failures)),
    )
}

pub fn c3_chunk_invariants(cases: u32) -> Check {
    let strategy = (strategies::schema(), strategies::question_and_hint(), -10i64..700);
    let template = PromptTemplates::default().link(LinkMode::Chunked).clone();
    let result = run_property(cases, strategy, |(schema, (q, h), extra)| {
        let scaffold = heuristic_tokens(&template.render(&[("question", &q), ("hint", &h), ("schema", "")]));
        let budget = (scaffold as i64 + extra).max(1) as usize;
        check_chunking(&schema, &q, &h, budget).map_err(TestCaseError::fail)
    });
    match result {
        Ok(()) => Check::new(true, format!("{cases} random schema/budget cases, 0 violations")),
        Err(e) => Check::new(false, e),
    }
}

pub fn round_trip(link: &SchemaLink) -> Result<(), String> {
    let text = serialize_link(link);
    let parsed = parse_link_response(&text, &[] as &[&str]);
    if !parsed.flagged.is_empty() {
        return Err(format!("flagged lines in {text:?}: {:?}", parsed.flagged));
    }
    if parsed.link != *link || serialize_link(&parsed.link) != text {
        return Err(format!("round trip changed {text:?} into {:?}", serialize_link(&parsed.link)));
    }
    Ok(())
}

pub fn merge_algebra(a: &SchemaLink, b: &SchemaLink, c: &SchemaLink) -> Result<(), String> {
    let ab = merge_links([a, b]);
    if ab != merge_links([b, a]) {
        return Err("merge is not commutative".into());
    }
    if merge_links([&ab, c]) != merge_links([a, &merge_links([b, c])]) {
        return Err("merge is not associative".into());
    }
    if merge_links([a, a]) != *a {
        return Err("merge is not idempotent".into());
    }
    Ok(())
}

pub fn c4_round_trip_and_merge(cases: u32) -> Check {
    let rt = run_property(cases, strategies::link(), |l| round_trip(&l).map_err(TestCaseError::fail));
    let merge = run_property(
        cases,
        (strategies::link(), strategies::link(), strategies::link()),
        |(a, b, c)| merge_algebra(&a, &b, &c).map_err(TestCaseError::fail),
    );
    match (rt, merge) {
        (Ok(()), Ok(())) => Check::new(true, format!("{cases} round trips, {cases} merge triples, 0 violations")),
        (r, m) => Check::new(false, format!("round trip: {r:?}; merge: {m:?}")),
    }
}

/// Budgets that force the fixture schemas into several chunks.
pub const RESTRICTION_BUDGETS: [usize; 9] = [150, 170, 190, 220, 260, 320, 400, 600, 4096];

pub fn c5_restriction() -> Check {
    let corpus = Corpus::new();
    let schemas = corpus.schemas();
    let examples: Vec<Example> = linksql::corpus::load_examples(&corpus.path().join("dev.json")).unwrap();
    let template = PromptTemplates::default().link(LinkMode::Chunked).clone();
    let mut checked = 0;
    let mut split_cases = 0;
    let mut multi = 0;
    let mut failures = Vec::new();
    for ex in &examples {
        let schema = schemas.get(&ex.db_id).unwrap();
        let gold = extract_links(&ex.gold_sql, &schema).unwrap();
        for max in RESTRICTION_BUDGETS {
            let budget = TokenBudget::new(max).unwrap();
            let Ok(chunks) = chunk_schema(&schema, &ex.question, ex.hint(), &budget, &template) else {
                continue;
            };
            let parts: Vec<SchemaLink> =
                chunks.iter().map(|c| restrict_to_scope(&gold, &chunk_scope(c))).collect();
            let mut merged = merge_links(&parts);
            merged.complete_foreign_keys(&schema);
            let split = chunks.iter().any(|c| c.has_column_split());
            if chunks.len() > 1 {
                multi += 1;
            }
            if split {
                split_cases += 1;
            }
            checked += 1;
            if merged != gold && !split {
                failures.push(format!("question {} at budget {max}", ex.question_id));
            }
        }
    }
    Check::new(
        failures.is_empty() && multi > 0,
        format!(
            "{checked} example/budget pairs ({multi} multi-chunk, {split_cases} with column splits), {} violations{}",
            failures.len(),
            fail_list(&failures)
        ),
    )
}

pub fn run_and_eval(ws: &Workspace) -> EvalReport {
    pipeline::cmd_run(ws).expect("run succeeds");
    pipeline::cmd_eval(ws, &ws.out(pipeline::PREDICTIONS_FILE), &ws.config.variant.to_string())
        .expect("eval succeeds")
}

pub fn c6_identity_run() -> Check {
    let corpus = Corpus::new();
    let start = Instant::now();
    let mut details = Vec::new();
    let mut passed = true;
    for mode in ["trusting", "non_trusting", "non_trusting_link_only"] {
        let body = format!(
            "{}\n[backend.sql]\nkind = \"replay_gold_sql\"\n\n[run]\noutput_dir = \"out_{mode}\"\n",
            variant_toml("perfect", mode)
        );
        let ws = corpus.workspace(&format!("identity_{mode}"), &body);
        let report = run_and_eval(&ws);
        passed &= report.total.count == 25 && report.total.correct == 25 && report.gold_errors == 0;
        details.push(format!("perfect+{mode} {:.2}% of {}", report.total.accuracy, report.total.count));
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(60);
    Check::new(passed, format!("{} in {:.2}s", details.join(", "), elapsed.as_secs_f64()))
}

pub fn prediction(question_id: i64, sql: &str) -> Prediction {
    Prediction {
        question_id,
        sql: sql.to_string(),
        extraction: Extraction::Verbatim,
        link: None,
        validation_report: None,
        error: None,
    }
}

pub const WRONG_SQL: &str = "SELECT -987654321, 'no such answer'";
pub const ENDLESS_SQL: &str = "WITH RECURSIVE r(n) AS (SELECT 1 UNION ALL SELECT n + 1 FROM r) SELECT count(*) FROM r";

pub fn permuted(gold: &str) -> String {
    format!("SELECT * FROM ({gold}) ORDER BY random()")
}

pub fn evaluate_fixture(corpus: &Corpus, examples: &[Example], preds: &[Prediction], timeout: Duration) -> EvalReport {
    let root = corpus.db_root();
    let db_path = move |db: &str| root.join(db).join(format!("{db}.sqlite"));
    evalx::evaluate(examples, preds, &db_path, timeout, 4).expect("evaluation runs")
}

pub fn c7_harness() -> Check {
    let corpus = Corpus::new();
    let examples = linksql::corpus::load_examples(&corpus.path().join("dev.json")).unwrap();
    let wrong: Vec<_> = examples.iter().map(|e| prediction(e.question_id, WRONG_SQL)).collect();
    let wrong = evaluate_fixture(&corpus, &examples, &wrong, Duration::from_secs(5));
    let perm: Vec<_> = examples.iter().map(|e| prediction(e.question_id, &permuted(&e.gold_sql))).collect();
    let perm = evaluate_fixture(&corpus, &examples, &perm, Duration::from_secs(5));
    let mut mixed: Vec<_> = examples.iter().map(|e| prediction(e.question_id, &e.gold_sql)).collect();
    mixed[3].sql = ENDLESS_SQL.to_string();
    let start = Instant::now();
    let mixed = evaluate_fixture(&corpus, &examples, &mixed, Duration::from_millis(500));
    let elapsed = start.elapsed();
    let timed_out = mixed.outcomes.iter().find(|o| o.question_id == examples[3].question_id).map(|o| o.status);
    let passed = wrong.total.correct == 0
        && wrong.total.count == 25
        && perm.total.correct == 25
        && timed_out == Some(Status::Timeout)
        && mixed.total.count == 25
        && mixed.total.correct == 24;
    Check::new(
        passed,
        format!(
            "wrong {:.2}%, row-permuted {:.2}%, endless query {:?} with {}/{} others correct in {:.2}s",
            wrong.total.accuracy,
            perm.total.accuracy,
            timed_out,
            mixed.total.correct,
            mixed.total.count - 1,
            elapsed.as_secs_f64()
        ),
    )
}

/// Parses the percentage cells of a rendered row.
pub fn row_cells(row: &str) -> Vec<f64> {
    row.trim_end_matches("\\\\")
        .split('&')
        .skip(1)
        .map(|c| c.trim().trim_end_matches("\\%").parse().expect("percentage cell"))
        .collect()
}

/// Recomputes (simple, moderate, challenging, total) from raw outcomes.
pub fn refold(report: &EvalReport) -> [f64; 4] {
    let mut n = [0usize; 4];
    let mut c = [0usize; 4];
    for o in &report.outcomes {
        if o.status == Status::GoldError {
            continue;
        }
        let i = Difficulty::ALL.iter().position(|d| *d == o.difficulty).unwrap();
        for j in [i, 3] {
            n[j] += 1;
            c[j] += usize::from(o.status == Status::Correct);
        }
    }
    std::array::from_fn(|i| if n[i] == 0 { 0.0 } else { 100.0 * c[i] as f64 / n[i] as f64 })
}

/// Checks row structure, re-folded values and the weighted-total identity.
pub fn report_fidelity(label: &str, report: &EvalReport) -> Result<(), String> {
    let table = evalx::render_table(&[(label.to_string(), report.clone())]);
    let lines: Vec<&str> = table.lines().collect();
    if lines.first() != Some(&"Model & Simple & Moderate & Challenging & Total \\\\") {
        return Err(format!("bad header {:?}", lines.first()));
    }
    let row = lines.get(1).ok_or("missing row")?;
    if !row.starts_with(&format!("{label} & ")) {
        return Err(format!("bad row {row:?}"));
    }
    let cells = row_cells(row);
    let refolded = refold(report);
    for (shown, expected) in cells.iter().zip(refolded) {
        if (shown - expected).abs() > 0.005 + 1e-9 {
            return Err(format!("cell {shown} differs from re-folded {expected:.4}"));
        }
    }
    let weighted: f64 = Difficulty::ALL
        .iter()
        .map(|d| {
            let s = report.stratum(*d);
            s.accuracy * s.count as f64
        })
        .sum::<f64>()
        / report.total.count.max(1) as f64;
    if (weighted - report.total.accuracy).abs() > 0.01 {
        return Err(format!("weighted total {weighted} != {}", report.total.accuracy));
    }
    Ok(())
}

pub fn synthetic_report(counts: [(usize, usize); 3]) -> EvalReport {
    let mut outcomes = Vec::new();
    let mut id = 0;
    for (d, (n, correct)) in Difficulty::ALL.iter().zip(counts) {
        for k in 0..n {
            outcomes.push(evalx::ExecutionOutcome {
                question_id: id,
                db_id: "db".into(),
                difficulty: *d,
                status: if k < correct { Status::Correct } else { Status::Incorrect },
                pred_rows: None,
                gold_rows: None,
                duplicate_laxity: false,
                detail: None,
                wall_time: Duration::ZERO,
            });
            id += 1;
        }
    }
    EvalReport::from_outcomes(outcomes)
}

pub fn c8_report_fidelity() -> Check {
    let corpus = Corpus::new();
    let examples = linksql::corpus::load_examples(&corpus.path().join("dev.json")).unwrap();
    let preds: Vec<_> = examples
        .iter()
        .map(|e| prediction(e.question_id, if e.question_id % 3 == 0 { WRONG_SQL } else { &e.gold_sql }))
        .collect();
    let mixed = evaluate_fixture(&corpus, &examples, &preds, Duration::from_secs(5));

    let dir = corpus.path().join("saved");
    fs::create_dir_all(&dir).unwrap();
    let saved = dir.join(pipeline::EVAL_REPORT_FILE);
    fs::write(&saved, mixed.to_json()).unwrap();
    let reloaded: EvalReport = serde_json::from_str(&fs::read_to_string(&saved).unwrap()).unwrap();
    let from_file = pipeline::cmd_report(&[("mixed".to_string(), saved)]).unwrap();

    let reference = synthetic_report([(925, 192), (465, 27), (144, 2)]);
    let reference_row = evalx::render_row("baseline", &reference);

    let mut errors = Vec::new();
    for (label, r) in [("mixed", &mixed), ("reloaded", &reloaded), ("baseline", &reference)] {
        if let Err(e) = report_fidelity(label, r) {
            errors.push(format!("{label}: {e}"));
        }
    }
    if from_file.lines().nth(1) != Some(evalx::render_row("mixed", &mixed).as_str()) {
        errors.push("report from saved JSON differs".into());
    }
    if reference_row != "baseline & 20.76\\% & 5.81\\% & 1.39\\% & 14.41\\% \\\\" {
        errors.push(format!("table row {reference_row:?}"));
    }
    Check::new(
        errors.is_empty(),
        format!(
            "mixed row `{}`; 1534-example row `{reference_row}`{}",
            evalx::render_row("mixed", &mixed),
            fail_list(&errors)
        ),
    )
}

pub fn c9_constants() -> Check {
    let defaults = BudgetConfig::default();
    let mut errors = Vec::new();
    if linksql::chunker::DEFAULT_CHUNK_BUDGET != 4096 || defaults.link_chunked != 4096 {
        errors.push("chunk budget is not 4096".to_string());
    }
    if linksql::prompts::DEFAULT_ND_BUDGET != 5000 || defaults.link_nd != 5000 {
        errors.push("ND budget is not 5000".to_string());
    }
    let (n, source) = match std::env::var_os("BIRD_TRAIN_JSON") {
        Some(p) => match linksql::corpus::load_examples(Path::new(&p)) {
            Ok(ex) => (ex.len(), format!("BIRD train set at {}", Path::new(&p).display())),
            Err(e) => {
                errors.push(format!("cannot load BIRD train set: {e}"));
                (0, "unavailable".into())
            }
        },
        None => (8952, "synthetic 8952 ids; real BIRD train set not present".to_string()),
    };
    let ids: Vec<i64> = (0..n as i64).collect();
    let validation = split_ids(&ids, linksql::prompts::DEFAULT_VALIDATION_FRACTION, 0).len();
    let train = n - validation;
    if (train, validation) != (7609, 1343) {
        errors.push(format!("split {train}/{validation}"));
    }
    Check::new(
        errors.is_empty(),
        format!("chunk 4096, ND 5000, split {train}/{validation} ({source}){}", fail_list(&errors)),
    )
}

/// Writes fixture-backend files holding the oracle completions of a prior run,
/// with SQL wrapped in chatter and a fenced block.
pub fn fixtures_from_run(ws: &Workspace, dir: &Path) {
    #[derive(serde::Deserialize, serde::Serialize)]
    struct Rec {
        question_id: i64,
        stage: linksql::prompts::Stage,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        chunk_index: Option<usize>,
        raw_text: String,
    }
    let links: Vec<Rec> = pipeline::read_jsonl(&ws.out(pipeline::LINK_COMPLETIONS_FILE)).unwrap();
    let mut sql: Vec<Rec> = pipeline::read_jsonl(&ws.out(pipeline::SQL_COMPLETIONS_FILE)).unwrap();
    for r in &mut sql {
        r.raw_text = format!("Here is the query:\n```sql\n{}\n```\nIt should work.", r.raw_text);
    }
    pipeline::write_jsonl(&dir.join("link_fixture.jsonl"), &links).unwrap();
    pipeline::write_jsonl(&dir.join("sql_fixture.jsonl"), &sql).unwrap();
}

pub fn c10_determinism() -> Check {
    let corpus = Corpus::new();
    let variant = variant_toml("chunked", "non_trusting");
    let seeded = format!(
        "{variant}\n[budgets]\nlink_chunked = 260\n\n[backend.link]\nkind = \"oracle_links\"\n\n[backend.sql]\nkind = \"replay_gold_sql\"\n\n[run]\noutput_dir = \"seed_run\"\nseed = 11\n"
    );
    let seed_ws = corpus.workspace("seed", &seeded);
    pipeline::cmd_run(&seed_ws).unwrap();
    fixtures_from_run(&seed_ws, corpus.path());

    let mut outputs = BTreeMap::new();
    for (name, parallelism) in [("run_a", 1), ("run_b", 8)] {
        let body = format!(
            "{variant}\n[budgets]\nlink_chunked = 260\n\n[backend.link]\nkind = \"fixture\"\nfixture_path = \"link_fixture.jsonl\"\n\n[backend.sql]\nkind = \"fixture\"\nfixture_path = \"sql_fixture.jsonl\"\n\n[run]\noutput_dir = \"{name}\"\nseed = 11\nparallelism = {parallelism}\n"
        );
        let ws = corpus.workspace(name, &body);
        pipeline::cmd_run(&ws).unwrap();
        outputs.insert(name, fs::read(ws.out(pipeline::PREDICTIONS_FILE)).unwrap());
    }
    let a = &outputs["run_a"];
    let b = &outputs["run_b"];
    let lines = String::from_utf8_lossy(a).lines().count();
    let fenced = String::from_utf8_lossy(a).contains("```");
    Check::new(
        a == b && lines == 25 && !fenced,
        format!("{} bytes, {lines} predictions, identical: {}", a.len(), a == b),
    )
}
