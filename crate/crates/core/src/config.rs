//! Run configuration: a TOML file with `${VAR}` interpolation and paths
//! relative to the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chunker::{TokenBudget, Tokenizer, DEFAULT_CHUNK_BUDGET};
use crate::corpus::DescriptionColumns;
use crate::error::{Error, Result};
use crate::evalx::DEFAULT_QUERY_TIMEOUT;
use crate::infer::{BackendConfig, BackendKind};
use crate::prompts::{
    LinkMode, PipelineVariant, StageBudgets, TemplatePaths, DEFAULT_ND_BUDGET, DEFAULT_SQL_BUDGET,
    DEFAULT_VALIDATION_FRACTION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// BIRD-style examples JSON.
    pub examples: PathBuf,
    /// Directory holding `<db_id>/<db_id>.sqlite`.
    pub db_root: PathBuf,
    /// Gold links from `extract-links`; extracted on the fly when absent.
    #[serde(default)]
    pub gold_links: Option<PathBuf>,
    /// Links from an earlier run, for non-trusting SQL exports.
    #[serde(default)]
    pub predicted_links: Option<PathBuf>,
    #[serde(default)]
    pub description_columns: Option<DescriptionColumns>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default = "default_nd")]
    pub link_nd: usize,
    #[serde(default = "default_chunk")]
    pub link_chunked: usize,
    #[serde(default = "default_sql")]
    pub sql: usize,
    #[serde(default)]
    pub tokenizer: Tokenizer,
}

fn default_nd() -> usize {
    DEFAULT_ND_BUDGET
}
fn default_chunk() -> usize {
    DEFAULT_CHUNK_BUDGET
}
fn default_sql() -> usize {
    DEFAULT_SQL_BUDGET
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            link_nd: DEFAULT_ND_BUDGET,
            link_chunked: DEFAULT_CHUNK_BUDGET,
            sql: DEFAULT_SQL_BUDGET,
            tokenizer: Tokenizer::Heuristic,
        }
    }
}

impl BudgetConfig {
    pub fn stage_budgets(&self) -> Result<StageBudgets> {
        let b = |n| TokenBudget::with_tokenizer(n, self.tokenizer.clone());
        Ok(StageBudgets { link_nd: b(self.link_nd)?, link_chunked: b(self.link_chunked)?, sql: b(self.sql)? })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBackends {
    #[serde(default)]
    pub link: Option<BackendConfig>,
    #[serde(default)]
    pub sql: Option<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
    /// Repair predicted links against the schema before the SQL stage.
    #[serde(default = "default_true")]
    pub repair_links: bool,
}

fn default_parallelism() -> usize {
    4
}
fn default_timeout() -> f64 {
    DEFAULT_QUERY_TIMEOUT.as_secs_f64()
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_fraction() -> f64 {
    DEFAULT_VALIDATION_FRACTION
}
fn default_true() -> bool {
    true
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            parallelism: default_parallelism(),
            timeout_secs: default_timeout(),
            output_dir: default_output(),
            seed: 0,
            limit: None,
            validation_fraction: default_fraction(),
            repair_links: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub variant: PipelineVariant,
    #[serde(default)]
    pub budgets: BudgetConfig,
    #[serde(default)]
    pub backend: StageBackends,
    #[serde(default)]
    pub templates: TemplatePaths,
    #[serde(default)]
    pub run: RunSettings,
}

/// Replaces `${NAME}` with the environment variable's value. `$$` is a
/// literal dollar sign.
pub fn interpolate_env(text: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let after = &rest[i + 1..];
        if let Some(tail) = after.strip_prefix('$') {
            out.push('$');
            rest = tail;
        } else if let Some(body) = after.strip_prefix('{') {
            let end = body
                .find('}')
                .ok_or_else(|| Error::Config("unterminated ${...} in config".into()))?;
            let name = &body[..end];
            let value =
                lookup(name).ok_or_else(|| Error::Config(format!("environment variable {name} is not set")))?;
            out.push_str(&value);
            rest = &body[end + 1..];
        } else {
            out.push('$');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

fn require_file(what: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", p.display())))
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let text = interpolate_env(text, &|k| std::env::var(k).ok())?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus.examples);
        resolve(base, &mut self.corpus.db_root);
        resolve_opt(base, &mut self.corpus.gold_links);
        resolve_opt(base, &mut self.corpus.predicted_links);
        let t = &mut self.templates;
        for p in [
            &mut t.link_nd,
            &mut t.link_chunked,
            &mut t.sql_direct,
            &mut t.sql_trusting,
            &mut t.sql_non_trusting,
            &mut t.sql_non_trusting_link_only,
        ] {
            resolve_opt(base, p);
        }
        for b in [&mut self.backend.link, &mut self.backend.sql].into_iter().flatten() {
            resolve_opt(base, &mut b.fixture_path);
        }
        resolve(base, &mut self.run.output_dir);
    }

    /// Checks paths and settings that every subcommand needs.
    pub fn validate(&self) -> Result<()> {
        require_file("examples file", &self.corpus.examples)?;
        if !self.corpus.db_root.is_dir() {
            return Err(Error::Config(format!("db_root {} is not a directory", self.corpus.db_root.display())));
        }
        if let Some(p) = &self.corpus.gold_links {
            require_file("gold_links", p)?;
        }
        if let Some(p) = &self.corpus.predicted_links {
            require_file("predicted_links", p)?;
        }
        let t = &self.templates;
        for p in [
            &t.link_nd,
            &t.link_chunked,
            &t.sql_direct,
            &t.sql_trusting,
            &t.sql_non_trusting,
            &t.sql_non_trusting_link_only,
        ]
        .into_iter()
        .flatten()
        {
            require_file("template", p)?;
        }
        self.variant.validate()?;
        self.budgets.stage_budgets()?;
        if self.run.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.run.timeout_secs.is_nan() || self.run.timeout_secs <= 0.0 {
            return Err(Error::Config("timeout_secs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.run.validation_fraction) {
            return Err(Error::Config("validation_fraction must be within [0, 1]".into()));
        }
        for b in [&self.backend.link, &self.backend.sql].into_iter().flatten() {
            b.validate()?;
            if let Some(p) = &b.fixture_path {
                require_file("fixture", p)?;
            }
        }
        Ok(())
    }

    /// Additional checks for `run`: the needed backends exist and fit the variant.
    pub fn validate_for_run(&self) -> Result<()> {
        self.validate()?;
        if self.variant.runs_link_stage() && self.backend.link.is_none() {
            return Err(Error::Config(format!("variant {} needs a [backend.link] section", self.variant)));
        }
        if self.variant.link_mode == LinkMode::Perfect
            && self.backend.link.as_ref().is_some_and(|b| b.kind == BackendKind::Http)
        {
            return Err(Error::Config("perfect links come from gold SQL; an http link backend is not allowed".into()));
        }
        if self.backend.sql.is_none() {
            return Err(Error::Config("a [backend.sql] section is required".into()));
        }
        Ok(())
    }

    /// Applies `kind` (both stages) or `stage=kind`, keeping other settings.
    pub fn apply_backend_override(&mut self, spec: &str) -> Result<()> {
        let (stages, kind): (Vec<&str>, &str) = match spec.split_once('=') {
            Some((stage, kind)) => (vec![stage.trim()], kind.trim()),
            None => (vec!["link", "sql"], spec.trim()),
        };
        let kind: BackendKind = kind.parse()?;
        for stage in stages {
            let slot = match stage {
                "link" => &mut self.backend.link,
                "sql" => &mut self.backend.sql,
                other => return Err(Error::Config(format!("unknown stage `{other}` in backend override"))),
            };
            match slot {
                Some(b) => b.kind = kind,
                None => *slot = Some(BackendConfig::of_kind(kind)),
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_secs_f64(self.run.timeout_secs)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
