#![allow(dead_code)]

pub mod criteria;
pub mod strategies;

use std::fs;
use std::path::{Path, PathBuf};

use linksql::config::RunConfig;
use linksql::corpus::{DescriptionColumns, SchemaStore};
use linksql::pipeline::Workspace;
use serde::Deserialize;
use tempfile::TempDir;

pub const DATABASES: [&str; 3] = ["california_schools", "superhero", "debit_card"];

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// A hand-labeled query and its expected serialized link.
#[derive(Debug, Clone, Deserialize)]
pub struct OracleEntry {
    pub db_id: String,
    pub sql: String,
    #[serde(default)]
    pub link: String,
}

pub fn load_fixture<T: for<'de> Deserialize<'de>>(name: &str) -> T {
    let path = fixtures_dir().join(name);
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// The fixture corpus materialized as real SQLite databases in a temp dir.
pub struct Corpus {
    pub dir: TempDir,
}

impl Corpus {
    pub fn new() -> Corpus {
        let dir = tempfile::tempdir().expect("tempdir");
        let src = fixtures_dir().join("databases");
        for db in DATABASES {
            let target = dir.path().join("databases").join(db);
            let sheets = target.join("database_description");
            fs::create_dir_all(&sheets).unwrap();
            let ddl = fs::read_to_string(src.join(db).join("schema.sql")).unwrap();
            let conn = rusqlite::Connection::open(target.join(format!("{db}.sqlite"))).unwrap();
            conn.execute_batch(&ddl).unwrap();
            for entry in fs::read_dir(src.join(db).join("database_description")).unwrap() {
                let entry = entry.unwrap();
                fs::copy(entry.path(), sheets.join(entry.file_name())).unwrap();
            }
        }
        fs::copy(fixtures_dir().join("dev.json"), dir.path().join("dev.json")).unwrap();
        Corpus { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn db_root(&self) -> PathBuf {
        self.path().join("databases")
    }

    pub fn db_file(&self, db_id: &str) -> PathBuf {
        self.db_root().join(db_id).join(format!("{db_id}.sqlite"))
    }

    pub fn schemas(&self) -> SchemaStore {
        SchemaStore::new(self.db_root(), DescriptionColumns::default())
    }

    /// Writes `<name>.toml` with the corpus section filled in and `body` appended.
    pub fn write_config(&self, name: &str, body: &str) -> PathBuf {
        let path = self.path().join(format!("{name}.toml"));
        let text = format!(
            "[corpus]\nexamples = \"dev.json\"\ndb_root = \"databases\"\n\n{body}\n"
        );
        fs::write(&path, text).unwrap();
        path
    }

    pub fn workspace(&self, name: &str, body: &str) -> Workspace {
        let cfg = RunConfig::load(&self.write_config(name, body)).expect("config loads");
        Workspace::open(cfg).expect("workspace opens")
    }
}

pub fn variant_toml(link_mode: &str, sql_mode: &str) -> String {
    format!("[variant]\nlink_mode = \"{link_mode}\"\nsql_mode = \"{sql_mode}\"\n")
}
