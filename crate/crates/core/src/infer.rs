//! Model backends behind one contract: a live completion endpoint, a recorded
//! fixture file, a gold-link oracle, or a gold-SQL replay.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::linkex::{serialize_link, SchemaLink};
use crate::prompts::{restrict_to_scope, RenderedPrompt, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Fixture,
    OracleLinks,
    ReplayGoldSql,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "http" => Ok(BackendKind::Http),
            "fixture" => Ok(BackendKind::Fixture),
            "oracle_links" => Ok(BackendKind::OracleLinks),
            "replay_gold_sql" => Ok(BackendKind::ReplayGoldSql),
            other => Err(Error::Config(format!(
                "unknown backend kind `{other}` (expected http, fixture, oracle_links or replay_gold_sql)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    /// JSON Lines fixture for the `fixture` kind.
    #[serde(default)]
    pub fixture_path: Option<PathBuf>,
}

fn default_max_new_tokens() -> u32 {
    512
}
fn default_timeout_secs() -> f64 {
    120.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}

impl BackendConfig {
    pub fn of_kind(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            endpoint_url: None,
            model_name: None,
            api_key_env: None,
            max_new_tokens: default_max_new_tokens(),
            temperature: 0.0,
            request_timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            retry_backoff_ms: default_backoff_ms(),
            fixture_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.request_timeout_secs.is_nan() || self.request_timeout_secs <= 0.0 {
            return Err(Error::Config("request_timeout_secs must be positive".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint_url.is_none() => {
                Err(Error::Config("http backend requires endpoint_url".into()))
            }
            BackendKind::Fixture if self.fixture_path.is_none() => {
                Err(Error::Config("fixture backend requires fixture_path".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("question {question_id}: request timed out after {attempts} attempt(s)")]
    Timeout { question_id: i64, attempts: u32 },

    #[error("question {question_id}: request failed after {attempts} attempt(s): {message}")]
    Request { question_id: i64, attempts: u32, message: String },

    #[error("question {question_id}: malformed response: {message}")]
    Response { question_id: i64, message: String },

    #[error("no fixture entry for question {question_id}, stage {stage}, chunk {chunk_index:?}")]
    FixtureMiss { question_id: i64, stage: Stage, chunk_index: Option<usize> },

    #[error("question {question_id}: no gold data for this backend")]
    MissingGold { question_id: i64 },
}

/// Raw model output for one prompt. Failures are recorded, not raised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub question_id: i64,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_index: Option<usize>,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub backend_kind: BackendKind,
    pub prompt_hash: String,
    pub latency_ms: f64,
}

impl Completion {
    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }
}

pub trait Backend: Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, prompt: &RenderedPrompt) -> Result<String, BackendError>;
}

/// One line of a fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub question_id: i64,
    pub stage: Stage,
    #[serde(default)]
    pub chunk_index: Option<usize>,
    pub raw_text: String,
}

pub struct FixtureBackend {
    entries: HashMap<(i64, Stage, Option<usize>), String>,
}

impl FixtureBackend {
    pub fn from_records(records: impl IntoIterator<Item = FixtureRecord>) -> Self {
        FixtureBackend {
            entries: records
                .into_iter()
                .map(|r| ((r.question_id, r.stage, r.chunk_index), r.raw_text))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                record: Some(i),
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }
}

impl Backend for FixtureBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Fixture
    }

    fn complete(&self, p: &RenderedPrompt) -> Result<String, BackendError> {
        self.entries
            .get(&(p.question_id, p.stage, p.chunk_index))
            .cloned()
            .ok_or(BackendError::FixtureMiss { question_id: p.question_id, stage: p.stage, chunk_index: p.chunk_index })
    }
}

/// Answers link prompts with the gold link restricted to what the prompt shows.
pub struct OracleLinksBackend {
    links: BTreeMap<i64, SchemaLink>,
}

impl OracleLinksBackend {
    pub fn new(links: BTreeMap<i64, SchemaLink>) -> Self {
        OracleLinksBackend { links }
    }
}

impl Backend for OracleLinksBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::OracleLinks
    }

    fn complete(&self, p: &RenderedPrompt) -> Result<String, BackendError> {
        let link = self
            .links
            .get(&p.question_id)
            .ok_or(BackendError::MissingGold { question_id: p.question_id })?;
        Ok(match &p.scope {
            Some(scope) => serialize_link(&restrict_to_scope(link, scope)),
            None => serialize_link(link),
        })
    }
}

/// Answers every prompt with the example's gold SQL.
pub struct ReplayGoldSqlBackend {
    sql: HashMap<i64, String>,
}

impl ReplayGoldSqlBackend {
    pub fn new(examples: &[Example]) -> Self {
        ReplayGoldSqlBackend {
            sql: examples.iter().map(|e| (e.question_id, e.gold_sql.clone())).collect(),
        }
    }
}

impl Backend for ReplayGoldSqlBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::ReplayGoldSql
    }

    fn complete(&self, p: &RenderedPrompt) -> Result<String, BackendError> {
        self.sql
            .get(&p.question_id)
            .cloned()
            .ok_or(BackendError::MissingGold { question_id: p.question_id })
    }
}

/// OpenAI-compatible `/completions` client.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: Option<String>,
    token: Option<String>,
    max_new_tokens: u32,
    temperature: f64,
    max_retries: u32,
    backoff: Duration,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        let url = config
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::Config("http backend requires endpoint_url".into()))?;
        let token = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| Error::Config(format!("environment variable {var} (api_key_env) is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout())
            .build()
            .map_err(|e| Error::Config(format!("cannot build http client: {e}")))?;
        Ok(HttpBackend {
            client,
            url,
            model: config.model_name.clone(),
            token,
            max_new_tokens: config.max_new_tokens,
            temperature: config.temperature,
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.retry_backoff_ms),
        })
    }

    fn attempt(&self, p: &RenderedPrompt, attempts: u32) -> Result<String, Attempt> {
        let body = CompletionRequest {
            model: self.model.as_deref(),
            prompt: &p.text,
            max_tokens: self.max_new_tokens,
            temperature: self.temperature,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let question_id = p.question_id;
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Timeout { question_id, attempts })
            } else {
                Attempt::Retry(BackendError::Request { question_id, attempts, message: e.to_string() })
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let err = BackendError::Request { question_id, attempts, message: format!("http status {status}") };
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                Attempt::Retry(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        let parsed: CompletionResponse = resp.json().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Timeout { question_id, attempts })
            } else {
                Attempt::Fatal(BackendError::Response { question_id, message: e.to_string() })
            }
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| Attempt::Fatal(BackendError::Response { question_id, message: "no choices".into() }))
    }
}

impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn complete(&self, p: &RenderedPrompt) -> Result<String, BackendError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(p, attempts) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempts > self.max_retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    let wait = self.backoff.saturating_mul(1 << (attempts - 1).min(16));
                    log::warn!("{e}; retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        }
    }
}

/// Gold data some backends need.
#[derive(Default)]
pub struct BackendContext<'a> {
    pub examples: &'a [Example],
    pub gold_links: Option<&'a BTreeMap<i64, SchemaLink>>,
}

pub fn make_backend(config: &BackendConfig, ctx: &BackendContext<'_>) -> Result<Box<dyn Backend>> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Http => Box::new(HttpBackend::new(config)?),
        BackendKind::Fixture => {
            let path = config.fixture_path.as_ref().expect("validated");
            Box::new(FixtureBackend::load(path)?)
        }
        BackendKind::OracleLinks => {
            let links = ctx
                .gold_links
                .ok_or_else(|| Error::Config("oracle_links backend requires gold links".into()))?;
            Box::new(OracleLinksBackend::new(links.clone()))
        }
        BackendKind::ReplayGoldSql => Box::new(ReplayGoldSqlBackend::new(ctx.examples)),
    })
}

pub fn complete(prompt: &RenderedPrompt, backend: &dyn Backend) -> Completion {
    let start = Instant::now();
    let result = backend.complete(prompt);
    let latency_ms = start.elapsed().as_secs_f64() * 1000.0;
    let (raw_text, error) = match result {
        Ok(text) => (text, None),
        Err(e) => {
            log::warn!("{e}");
            (String::new(), Some(e.to_string()))
        }
    };
    Completion {
        question_id: prompt.question_id,
        stage: prompt.stage,
        chunk_index: prompt.chunk_index,
        raw_text,
        error,
        backend_kind: backend.kind(),
        prompt_hash: prompt.text_hash(),
        latency_ms,
    }
}

/// Completes every prompt with up to `parallelism` requests in flight.
/// Output order matches input order.
pub fn run_stage(prompts: &[RenderedPrompt], backend: &dyn Backend, parallelism: usize) -> Result<Vec<Completion>> {
    if parallelism == 0 {
        return Err(Error::Config("parallelism must be at least 1".into()));
    }
    let slots: Vec<Mutex<Option<Completion>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..parallelism.min(prompts.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                let c = complete(prompt, backend);
                *slots[i].lock().expect("slot lock") = Some(c);
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
        .collect())
}
