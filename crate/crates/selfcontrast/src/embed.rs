//! Embedders that need std: a JSONL lookup table and a remote HTTP service.
//!
//! The HTTP protocol is a single `POST` to the endpoint (path `/embed`) with
//! body `{"texts": [..]}`; the reply is `{"embeddings": [[..], ..]}` with one
//! vector per text, in request order.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use selfcontrast_core::filter::{EmbedError, Embedder, EmbeddingVector, HashedNgramEmbedder};

use crate::formats::{read_jsonl_values, FormatError};

/// Environment variable that replaces the configured HTTP endpoint.
pub const ENDPOINT_ENV: &str = "SELFCONTRAST_EMBED_URL";

/// Which embedder to use. Keys: `kind` plus that kind's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbedderSpec {
    HashedNgram {
        dim: usize,
        n: usize,
        seed: u64,
    },
    File {
        path: PathBuf,
        dim: usize,
    },
    Http {
        endpoint: String,
        dim: usize,
        #[serde(default = "default_batch_size")]
        batch_size: usize,
        #[serde(default = "default_concurrency")]
        concurrency: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_batch_size() -> usize {
    64
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    30_000
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        let h = HashedNgramEmbedder::default();
        EmbedderSpec::HashedNgram { dim: h.dim, n: h.n, seed: h.seed }
    }
}

impl EmbedderSpec {
    pub fn dim(&self) -> usize {
        match self {
            EmbedderSpec::HashedNgram { dim, .. } | EmbedderSpec::File { dim, .. } | EmbedderSpec::Http { dim, .. } => {
                *dim
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dim() == 0 {
            return Err("embedder dim must be at least 1".into());
        }
        match self {
            EmbedderSpec::HashedNgram { n, .. } if *n == 0 => Err("n-gram order must be at least 1".into()),
            EmbedderSpec::Http { batch_size, concurrency, .. } if *batch_size == 0 || *concurrency == 0 => {
                Err("batch_size and concurrency must be at least 1".into())
            }
            EmbedderSpec::Http { endpoint, .. } if endpoint.is_empty() => Err("endpoint is empty".into()),
            _ => Ok(()),
        }
    }

    /// Builds the embedder. Relative file paths resolve against `base`, and
    /// the HTTP endpoint is replaced by [`ENDPOINT_ENV`] when that is set.
    pub fn build(&self, base: &Path) -> Result<Box<dyn Embedder + Send + Sync>, FormatError> {
        Ok(match self {
            EmbedderSpec::HashedNgram { dim, n, seed } => Box::new(HashedNgramEmbedder { dim: *dim, n: *n, seed: *seed }),
            EmbedderSpec::File { path, dim } => Box::new(FileEmbedder::load(&base.join(path), *dim)?),
            EmbedderSpec::Http { endpoint, dim, batch_size, concurrency, timeout_ms } => {
                let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|v| !v.is_empty()).unwrap_or(endpoint.clone());
                Box::new(RemoteEmbedder {
                    config: RemoteConfig {
                        endpoint,
                        dim: *dim,
                        batch_size: *batch_size,
                        concurrency: *concurrency,
                        timeout: Duration::from_millis(*timeout_ms),
                        ..RemoteConfig::default()
                    },
                })
            }
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEntry {
    text: String,
    embedding: Vec<f64>,
}

/// Precomputed embeddings keyed by exact text, read from JSONL lines
/// `{"text": .., "embedding": [..]}`.
#[derive(Debug, Clone, Default)]
pub struct FileEmbedder {
    table: HashMap<String, EmbeddingVector>,
    dim: usize,
}

impl FileEmbedder {
    pub fn load(path: &Path, dim: usize) -> Result<Self, FormatError> {
        let entries: Vec<FileEntry> = read_jsonl_values(path)?;
        let mut table = HashMap::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            let bad = |message: String| FormatError::Parse { path: path.to_path_buf(), line: i + 1, message };
            if e.embedding.len() != dim {
                return Err(bad(format!("embedding has dimension {}, expected {dim}", e.embedding.len())));
            }
            if e.embedding.iter().any(|v| !v.is_finite()) {
                return Err(bad("embedding has a non-finite entry".into()));
            }
            if table.insert(e.text.clone(), EmbeddingVector(e.embedding)).is_some() {
                return Err(bad(format!("text {:?} appears twice", e.text)));
            }
        }
        Ok(FileEmbedder { table, dim })
    }

    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Self {
        FileEmbedder { table: pairs.into_iter().collect(), dim }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Embedder for FileEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .map(|t| self.table.get(*t).cloned().ok_or_else(|| EmbedError(format!("no embedding for text {t:?}"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Expected vector dimension.
    pub dim: usize,
    pub batch_size: usize,
    /// Maximum number of batches in flight.
    pub concurrency: usize,
    /// Retries after the first attempt for transport errors and 5xx/429.
    pub retries: u32,
    /// Delay before retry `k` (from 0) is `backoff * 2^k`.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: String::new(),
            dim: HashedNgramEmbedder::default().dim,
            batch_size: default_batch_size(),
            concurrency: default_concurrency(),
            retries: 3,
            backoff: Duration::from_millis(100),
            timeout: Duration::from_millis(default_timeout_ms()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RemoteError {
    #[error("batch {batch}: request failed after {attempts} attempts: {message}")]
    Transport { batch: usize, attempts: u32, message: String },
    #[error("batch {batch}: server answered HTTP {status}: {body}")]
    Status { batch: usize, status: u16, body: String },
    #[error("batch {batch}: malformed response body: {message}")]
    Malformed { batch: usize, message: String },
    #[error("batch {batch}: expected {expected} embeddings, got {got}")]
    Shape { batch: usize, expected: usize, got: usize },
    #[error("batch {batch}: embedding {index} has dimension {got}, expected {expected}")]
    Dimension { batch: usize, index: usize, expected: usize, got: usize },
    #[error("batch {batch}: embedding {index} has a non-finite entry")]
    NonFinite { batch: usize, index: usize },
    #[error("invalid remote embedder config: {0}")]
    Config(String),
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

enum Attempt {
    Retry(String),
    Fail(RemoteError),
}

fn post_batch(agent: &ureq::Agent, cfg: &RemoteConfig, batch: usize, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RemoteError> {
    let mut last = String::new();
    for attempt in 0..=cfg.retries {
        if attempt > 0 {
            thread::sleep(cfg.backoff * 2u32.saturating_pow(attempt - 1));
        }
        match try_batch(agent, cfg, batch, texts) {
            Ok(v) => return Ok(v),
            Err(Attempt::Fail(e)) => return Err(e),
            Err(Attempt::Retry(msg)) => {
                log::debug!("embed batch {batch} attempt {} failed: {msg}", attempt + 1);
                last = msg;
            }
        }
    }
    Err(RemoteError::Transport { batch, attempts: cfg.retries + 1, message: last })
}

fn try_batch(agent: &ureq::Agent, cfg: &RemoteConfig, batch: usize, texts: &[&str]) -> Result<Vec<EmbeddingVector>, Attempt> {
    let mut resp = agent
        .post(&cfg.endpoint)
        .send_json(EmbedRequest { texts })
        .map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = resp.status().as_u16();
    let body = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
    if status == 429 || status >= 500 {
        return Err(Attempt::Retry(format!("HTTP {status}: {body}")));
    }
    if status != 200 {
        return Err(Attempt::Fail(RemoteError::Status { batch, status, body }));
    }
    let parsed: EmbedResponse = serde_json::from_str(&body)
        .map_err(|e| Attempt::Fail(RemoteError::Malformed { batch, message: e.to_string() }))?;
    if parsed.embeddings.len() != texts.len() {
        return Err(Attempt::Fail(RemoteError::Shape { batch, expected: texts.len(), got: parsed.embeddings.len() }));
    }
    parsed
        .embeddings
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            if v.len() != cfg.dim {
                Err(Attempt::Fail(RemoteError::Dimension { batch, index, expected: cfg.dim, got: v.len() }))
            } else if v.iter().any(|x| !x.is_finite()) {
                Err(Attempt::Fail(RemoteError::NonFinite { batch, index }))
            } else {
                Ok(EmbeddingVector(v))
            }
        })
        .collect()
}

/// Embeds `texts` through the remote service, batch by batch, with up to
/// `concurrency` batches in flight. Output order equals input order. An
/// empty input returns immediately without contacting the server. When
/// several batches fail, the error of the lowest batch index is returned.
pub fn embed_remote(texts: &[&str], cfg: &RemoteConfig) -> Result<Vec<EmbeddingVector>, RemoteError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    if cfg.batch_size == 0 || cfg.concurrency == 0 {
        return Err(RemoteError::Config("batch_size and concurrency must be at least 1".into()));
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(cfg.timeout))
        .build()
        .into();
    let batches: Vec<&[&str]> = texts.chunks(cfg.batch_size).collect();
    let results: Mutex<Vec<Option<Result<Vec<EmbeddingVector>, RemoteError>>>> =
        Mutex::new((0..batches.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    thread::scope(|s| {
        for _ in 0..cfg.concurrency.min(batches.len()) {
            s.spawn(|| loop {
                let b = next.fetch_add(1, Ordering::SeqCst);
                if b >= batches.len() {
                    break;
                }
                let r = post_batch(&agent, cfg, b, batches[b]);
                results.lock().expect("no panics while holding the lock")[b] = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(texts.len());
    for r in results.into_inner().expect("workers joined") {
        out.extend(r.expect("every batch was processed")?);
    }
    Ok(out)
}

/// [`Embedder`] backed by [`embed_remote`].
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub config: RemoteConfig,
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        embed_remote(texts, &self.config).map_err(|e| EmbedError(e.to_string()))
    }
}

/// Embeds every distinct text once through `inner` and serves lookups from
/// the resulting table. Empty strings are skipped; they are never embedded.
pub fn precompute<'a>(
    inner: &dyn Embedder,
    texts: impl IntoIterator<Item = &'a str>,
    dim: usize,
) -> Result<FileEmbedder, EmbedError> {
    let mut seen = std::collections::BTreeSet::new();
    let unique: Vec<&str> = texts.into_iter().filter(|t| !t.is_empty() && seen.insert(*t)).collect();
    let vectors = inner.embed(&unique)?;
    if vectors.len() != unique.len() {
        return Err(EmbedError(format!("{} vectors for {} texts", vectors.len(), unique.len())));
    }
    if let Some((t, v)) = unique.iter().zip(&vectors).find(|(_, v)| v.dim() != dim) {
        return Err(EmbedError(format!("text {t:?} embedded with dimension {}, expected {dim}", v.dim())));
    }
    Ok(FileEmbedder::from_pairs(dim, unique.into_iter().map(String::from).zip(vectors)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_forms() {
        let spec: EmbedderSpec = serde_json::from_str(r#"{"kind":"hashed-ngram","dim":64,"n":2,"seed":5}"#).unwrap();
        assert_eq!(spec, EmbedderSpec::HashedNgram { dim: 64, n: 2, seed: 5 });
        let spec: EmbedderSpec = serde_json::from_str(r#"{"kind":"http","endpoint":"http://h/embed","dim":8}"#).unwrap();
        assert!(matches!(spec, EmbedderSpec::Http { batch_size: 64, concurrency: 4, .. }));
        assert!(serde_json::from_str::<EmbedderSpec>(r#"{"kind":"file","path":"x","dim":8,"n":3}"#).is_err());
        assert!(serde_json::from_str::<EmbedderSpec>(r#"{"kind":"sbert","dim":8}"#).is_err());
    }

    #[test]
    fn empty_input_sends_nothing() {
        // Nothing listens on this endpoint; success proves no request was made.
        let cfg = RemoteConfig { endpoint: "http://127.0.0.1:9/embed".into(), ..RemoteConfig::default() };
        assert_eq!(embed_remote(&[], &cfg).unwrap(), vec![]);
    }

    #[test]
    fn precompute_dedups_and_skips_empty() {
        let h = HashedNgramEmbedder::default();
        let table = precompute(&h, ["ab", "", "ab", "cd"], h.dim).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.embed(&["cd"]).unwrap(), h.embed(&["cd"]).unwrap());
        assert!(table.embed(&["zz"]).is_err());
    }
}
