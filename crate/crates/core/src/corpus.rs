//! Benchmark corpus ingestion: question files, SQLite schemas and column
//! description sheets in the BIRD layout.
//!
//! Identifier matching is ASCII case-insensitive and whitespace-trimmed
//! everywhere, mirroring SQLite's own rules.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Case-insensitive identifier comparison with surrounding whitespace ignored.
pub fn ident_eq(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

/// Normalized key for case-insensitive identifier maps.
pub fn ident_key(s: &str) -> String {
    s.trim().to_ascii_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub sql_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_description: Option<String>,
    #[serde(default)]
    pub is_primary_key: bool,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, sql_type: impl Into<String>) -> Self {
        ColumnDef {
            name: name.into(),
            sql_type: sql_type.into(),
            description: None,
            value_description: None,
            is_primary_key: false,
        }
    }

    pub fn primary_key(mut self) -> Self {
        self.is_primary_key = true;
        self
    }

    pub fn described(mut self, description: &str, values: Option<&str>) -> Self {
        self.description = Some(description.to_string());
        self.value_description = values.map(str::to_string);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    pub fn new(name: impl Into<String>, columns: Vec<ColumnDef>) -> Self {
        TableDef {
            name: name.into(),
            columns,
        }
    }

    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| ident_eq(&c.name, name))
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| ident_eq(&c.name, name))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

impl ForeignKey {
    pub fn new(from_table: &str, from_column: &str, to_table: &str, to_column: &str) -> Self {
        ForeignKey {
            from_table: from_table.to_string(),
            from_column: from_column.to_string(),
            to_table: to_table.to_string(),
            to_column: to_column.to_string(),
        }
    }

    fn key(&self) -> [String; 4] {
        [
            ident_key(&self.from_table),
            ident_key(&self.from_column),
            ident_key(&self.to_table),
            ident_key(&self.to_column),
        ]
    }

    pub fn touches(&self, table: &str) -> bool {
        ident_eq(&self.from_table, table) || ident_eq(&self.to_table, table)
    }
}

impl PartialEq for ForeignKey {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for ForeignKey {}

impl std::hash::Hash for ForeignKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl PartialOrd for ForeignKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ForeignKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableDef>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl DatabaseSchema {
    /// Builds a schema, checking table/column uniqueness and FK resolution.
    /// Foreign key identifiers are rewritten to the canonical casing.
    pub fn new(
        db_id: impl Into<String>,
        tables: Vec<TableDef>,
        foreign_keys: Vec<ForeignKey>,
    ) -> Result<Self> {
        let mut schema = DatabaseSchema {
            db_id: db_id.into(),
            tables,
            foreign_keys: Vec::new(),
        };
        let mut seen = HashMap::new();
        for table in &schema.tables {
            if table.name.trim().is_empty() {
                return Err(Error::Validation(format!("{}: empty table name", schema.db_id)));
            }
            if seen.insert(ident_key(&table.name), ()).is_some() {
                return Err(Error::Validation(format!(
                    "{}: duplicate table name {}",
                    schema.db_id, table.name
                )));
            }
            if table.columns.is_empty() {
                return Err(Error::Validation(format!(
                    "{}: table {} has no columns",
                    schema.db_id, table.name
                )));
            }
            let mut cols = HashMap::new();
            for col in &table.columns {
                if col.name.trim().is_empty() {
                    return Err(Error::Validation(format!(
                        "{}: empty column name in {}",
                        schema.db_id, table.name
                    )));
                }
                if cols.insert(ident_key(&col.name), ()).is_some() {
                    return Err(Error::Validation(format!(
                        "{}: duplicate column {}.{}",
                        schema.db_id, table.name, col.name
                    )));
                }
            }
        }
        for fk in foreign_keys {
            let canonical = schema.canonical_fk(&fk).ok_or_else(|| {
                Error::Validation(format!(
                    "{}: foreign key {}.{} -> {}.{} does not resolve",
                    schema.db_id, fk.from_table, fk.from_column, fk.to_table, fk.to_column
                ))
            })?;
            if !schema.foreign_keys.contains(&canonical) {
                schema.foreign_keys.push(canonical);
            }
        }
        Ok(schema)
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| ident_eq(&t.name, name))
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| ident_eq(&t.name, name))
    }

    pub fn column(&self, table: &str, column: &str) -> Option<(&TableDef, &ColumnDef)> {
        let t = self.table(table)?;
        t.column(column).map(|c| (t, c))
    }

    /// Tables that contain a column with this name, in catalog order.
    pub fn tables_with_column(&self, column: &str) -> Vec<&TableDef> {
        self.tables
            .iter()
            .filter(|t| t.column(column).is_some())
            .collect()
    }

    /// Resolves a foreign key against this schema, returning it in canonical casing.
    pub fn canonical_fk(&self, fk: &ForeignKey) -> Option<ForeignKey> {
        let (ft, fc) = self.column(&fk.from_table, &fk.from_column)?;
        let (tt, tc) = self.column(&fk.to_table, &fk.to_column)?;
        Some(ForeignKey::new(&ft.name, &fc.name, &tt.name, &tc.name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Simple, Difficulty::Moderate, Difficulty::Challenging];

    pub fn parse(label: &str) -> Option<Self> {
        match label.trim().to_ascii_lowercase().as_str() {
            "simple" => Some(Difficulty::Simple),
            "moderate" => Some(Difficulty::Moderate),
            "challenging" => Some(Difficulty::Challenging),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Challenging => "challenging",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub question_id: i64,
    pub db_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    pub gold_sql: String,
    pub difficulty: Difficulty,
}

impl Example {
    pub fn hint(&self) -> &str {
        self.evidence.as_deref().unwrap_or("")
    }
}

/// One record that failed validation during a lenient load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRecord {
    pub index: usize,
    pub field: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LoadReport {
    pub examples: Vec<Example>,
    /// Record indices whose difficulty was missing and defaulted to simple.
    pub defaulted_difficulty: Vec<usize>,
    pub rejected: Vec<RejectedRecord>,
    pub input_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// The first invalid record aborts the load.
    Strict,
    /// Invalid records are collected in the report.
    Lenient,
}

/// Loads a BIRD question file, failing on the first invalid record.
pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    Ok(load_examples_with(path, LoadMode::Strict)?.examples)
}

pub fn load_examples_with(path: &Path, mode: LoadMode) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<Value> = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        record: None,
        message: e.to_string(),
    })?;
    let mut report = LoadReport {
        input_count: records.len(),
        ..Default::default()
    };
    for (index, record) in records.iter().enumerate() {
        match example_from_record(index, record) {
            Ok((example, defaulted)) => {
                if defaulted {
                    log::warn!("record {index}: no difficulty label, defaulting to simple");
                    report.defaulted_difficulty.push(index);
                }
                report.examples.push(example);
            }
            Err(rejected) => match mode {
                LoadMode::Strict => {
                    return Err(Error::Validation(format!(
                        "{}: record {} field `{}`: {}",
                        path.display(),
                        rejected.index,
                        rejected.field,
                        rejected.reason
                    )))
                }
                LoadMode::Lenient => report.rejected.push(rejected),
            },
        }
    }
    Ok(report)
}

fn example_from_record(index: usize, record: &Value) -> std::result::Result<(Example, bool), RejectedRecord> {
    let reject = |field: &str, reason: String| RejectedRecord {
        index,
        field: field.to_string(),
        reason,
    };
    let obj = record
        .as_object()
        .ok_or_else(|| reject("<record>", "not a JSON object".into()))?;
    let text_field = |key: &str| -> std::result::Result<Option<String>, RejectedRecord> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(reject(key, format!("expected a string, found {other}"))),
        }
    };

    // Some train releases omit question_id; the record position stands in.
    let question_id = match obj.get("question_id") {
        None | Some(Value::Null) => index as i64,
        Some(v) => v
            .as_i64()
            .ok_or_else(|| reject("question_id", format!("expected an integer, found {v}")))?,
    };
    let db_id = text_field("db_id")?
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| reject("db_id", "missing".into()))?;
    let question = text_field("question")?.ok_or_else(|| reject("question", "missing".into()))?;
    let evidence = text_field("evidence")?;
    let gold_sql = text_field("SQL")?
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| reject("SQL", "missing or empty".into()))?;
    let (difficulty, defaulted) = match text_field("difficulty")? {
        None => (Difficulty::Simple, true),
        Some(label) => (
            Difficulty::parse(&label)
                .ok_or_else(|| reject("difficulty", format!("unknown label {label:?}")))?,
            false,
        ),
    };
    Ok((
        Example {
            question_id,
            db_id,
            question,
            evidence,
            gold_sql,
            difficulty,
        },
        defaulted,
    ))
}

/// Opens a SQLite file read-only. Fails on missing files instead of creating them.
pub fn open_read_only(db_file: &Path) -> Result<Connection> {
    Connection::open_with_flags(
        db_file,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI,
    )
    .map_err(|e| sqlite_io(db_file, e))
}

fn sqlite_io(path: &Path, e: rusqlite::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Reads tables, columns, primary keys and foreign keys from the catalog of a
/// SQLite database. Table and column order follow the catalog.
pub fn introspect_schema(db_file: &Path) -> Result<DatabaseSchema> {
    if !db_file.is_file() {
        return Err(Error::io(
            db_file,
            std::io::Error::new(std::io::ErrorKind::NotFound, "database file not found"),
        ));
    }
    let conn = open_read_only(db_file)?;
    let db_id = db_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let table_names: Vec<String> = {
        let mut stmt = conn
            .prepare(
                "SELECT name FROM sqlite_master WHERE type = 'table' \
                 AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid",
            )
            .map_err(|e| sqlite_io(db_file, e))?;
        let rows = stmt
            .query_map([], |r| r.get::<_, String>(0))
            .map_err(|e| sqlite_io(db_file, e))?;
        rows.collect::<rusqlite::Result<_>>()
            .map_err(|e| sqlite_io(db_file, e))?
    };
    if table_names.is_empty() {
        return Err(Error::Validation(format!(
            "{}: database has no tables",
            db_file.display()
        )));
    }

    let mut tables = Vec::with_capacity(table_names.len());
    let mut raw_fks = Vec::new();
    for name in &table_names {
        let mut stmt = conn
            .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")
            .map_err(|e| sqlite_io(db_file, e))?;
        let columns = stmt
            .query_map([name], |r| {
                Ok(ColumnDef {
                    name: r.get(0)?,
                    sql_type: r.get::<_, Option<String>>(1)?.unwrap_or_default(),
                    description: None,
                    value_description: None,
                    is_primary_key: r.get::<_, i64>(2)? > 0,
                })
            })
            .map_err(|e| sqlite_io(db_file, e))?
            .collect::<rusqlite::Result<Vec<_>>>()
            .map_err(|e| sqlite_io(db_file, e))?;
        tables.push(TableDef::new(name.clone(), columns));

        let mut stmt = conn
            .prepare(
                "SELECT \"table\", \"from\", \"to\" FROM pragma_foreign_key_list(?1) ORDER BY id, seq",
            )
            .map_err(|e| sqlite_io(db_file, e))?;
        let fks = stmt
            .query_map([name], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, Option<String>>(2)?,
                ))
            })
            .map_err(|e| sqlite_io(db_file, e))?
            .collect::<rusqlite::Result<Vec<_>>>()
            .map_err(|e| sqlite_io(db_file, e))?;
        for (to_table, from_column, to_column) in fks {
            raw_fks.push((name.clone(), from_column, to_table, to_column));
        }
    }

    let partial = DatabaseSchema::new(db_id.clone(), tables, Vec::new())?;
    let mut foreign_keys = Vec::new();
    for (from_table, from_column, to_table, to_column) in raw_fks {
        // A missing target column means "the referenced table's primary key".
        let to_column = match to_column {
            Some(c) => c,
            None => match partial
                .table(&to_table)
                .and_then(|t| t.columns.iter().find(|c| c.is_primary_key))
            {
                Some(pk) => pk.name.clone(),
                None => {
                    log::warn!("{db_id}: foreign key {from_table}.{from_column} -> {to_table} has no resolvable target");
                    continue;
                }
            },
        };
        let fk = ForeignKey::new(&from_table, &from_column, &to_table, &to_column);
        match partial.canonical_fk(&fk) {
            Some(c) => foreign_keys.push(c),
            None => log::warn!(
                "{db_id}: dropping foreign key {from_table}.{from_column} -> {to_table}.{to_column} (unresolvable)"
            ),
        }
    }
    DatabaseSchema::new(db_id, partial.tables, foreign_keys)
}

/// Names of the CSV header fields that carry descriptions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptionColumns {
    pub column_name: String,
    pub description: String,
    pub value_description: String,
}

impl Default for DescriptionColumns {
    fn default() -> Self {
        DescriptionColumns {
            column_name: "original_column_name".into(),
            description: "column_description".into(),
            value_description: "value_description".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SheetWarning {
    pub file: PathBuf,
    pub row: Option<usize>,
    pub message: String,
}

fn non_empty(s: Option<&str>) -> Option<String> {
    s.map(str::trim).filter(|s| !s.is_empty()).map(str::to_string)
}

/// Attaches column descriptions from a directory of per-table CSV sheets.
/// Sheets are matched to tables by file stem; rows that match nothing become
/// warnings. Table and column structure is never changed.
pub fn attach_descriptions(
    schema: DatabaseSchema,
    sheets: &Path,
    fields: &DescriptionColumns,
) -> Result<(DatabaseSchema, Vec<SheetWarning>)> {
    let mut schema = schema;
    let mut warnings = Vec::new();
    if !sheets.exists() {
        return Ok((schema, warnings));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(sheets)
        .map_err(|e| Error::io(sheets, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("csv"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();

    for file in files {
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let Some(table_idx) = schema.table_index(&stem) else {
            warnings.push(SheetWarning {
                file: file.clone(),
                row: None,
                message: format!("no table named {stem}"),
            });
            continue;
        };
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let text = match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => {
                warnings.push(SheetWarning {
                    file: file.clone(),
                    row: None,
                    message: "not valid UTF-8, decoded lossily".into(),
                });
                String::from_utf8_lossy(e.as_bytes()).into_owned()
            }
        };
        let text = text.trim_start_matches('\u{feff}');
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::io(&file, std::io::Error::other(e.to_string())))?
            .clone();
        let find = |name: &str| headers.iter().position(|h| ident_eq(h, name));
        let Some(name_idx) = find(&fields.column_name) else {
            warnings.push(SheetWarning {
                file: file.clone(),
                row: None,
                message: format!("missing header {}", fields.column_name),
            });
            continue;
        };
        let desc_idx = find(&fields.description);
        let value_idx = find(&fields.value_description);

        for (row_no, record) in reader.records().enumerate() {
            let record =
                record.map_err(|e| Error::io(&file, std::io::Error::other(e.to_string())))?;
            let Some(col_name) = record.get(name_idx).map(str::trim).filter(|s| !s.is_empty()) else {
                continue;
            };
            let table = &mut schema.tables[table_idx];
            let Some(col) = table.columns.iter_mut().find(|c| ident_eq(&c.name, col_name)) else {
                warnings.push(SheetWarning {
                    file: file.clone(),
                    row: Some(row_no),
                    message: format!("no column {col_name} in {}", table.name),
                });
                continue;
            };
            col.description = non_empty(desc_idx.and_then(|i| record.get(i)));
            col.value_description = non_empty(value_idx.and_then(|i| record.get(i)));
        }
    }
    Ok((schema, warnings))
}

/// Lazily loaded schemas for a BIRD database root
/// (`<root>/<db_id>/<db_id>.sqlite` plus `database_description/`).
#[derive(Debug)]
pub struct SchemaStore {
    root: PathBuf,
    fields: DescriptionColumns,
    cache: RwLock<HashMap<String, Arc<DatabaseSchema>>>,
}

impl SchemaStore {
    pub fn new(root: impl Into<PathBuf>, fields: DescriptionColumns) -> Self {
        SchemaStore {
            root: root.into(),
            fields,
            cache: RwLock::new(HashMap::new()),
        }
    }

    /// A store holding pre-built schemas, with no backing directory.
    pub fn from_schemas(schemas: impl IntoIterator<Item = DatabaseSchema>) -> Self {
        let store = SchemaStore::new(PathBuf::new(), DescriptionColumns::default());
        {
            let mut cache = store.cache.write().expect("schema cache poisoned");
            for s in schemas {
                cache.insert(s.db_id.clone(), Arc::new(s));
            }
        }
        store
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn db_path(&self, db_id: &str) -> PathBuf {
        self.root.join(db_id).join(format!("{db_id}.sqlite"))
    }

    pub fn get(&self, db_id: &str) -> Result<Arc<DatabaseSchema>> {
        if let Some(s) = self.cache.read().expect("schema cache poisoned").get(db_id) {
            return Ok(Arc::clone(s));
        }
        let path = self.db_path(db_id);
        let schema = introspect_schema(&path)?;
        let sheets = self.root.join(db_id).join("database_description");
        let (mut schema, warnings) = attach_descriptions(schema, &sheets, &self.fields)?;
        for w in &warnings {
            log::warn!("{}: {}", w.file.display(), w.message);
        }
        schema.db_id = db_id.to_string();
        let schema = Arc::new(schema);
        self.cache
            .write()
            .expect("schema cache poisoned")
            .insert(db_id.to_string(), Arc::clone(&schema));
        Ok(schema)
    }

    /// Checks that every db_id has a database file, listing the missing ones.
    pub fn check_available<'a>(&self, db_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let cache = self.cache.read().expect("schema cache poisoned");
        let mut missing: Vec<&str> = db_ids
            .into_iter()
            .filter(|id| !cache.contains_key(*id) && !self.db_path(id).is_file())
            .collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "missing database files for: {}",
                missing.join(", ")
            )))
        }
    }
}
