//! First-available image retrieval behind a pluggable search provider.
//!
//! Each query is sent to a [`SearchProvider`]; candidates are tried in order
//! and the first one that downloads and decodes as an image is kept. Results
//! are cached on disk keyed by `(provider, normalized query, rank)`, image
//! bytes are stored once under their SHA-256, and failures are cached too so
//! that a re-run makes no provider calls at all.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::query_builder::QuerySet;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("provider error: {0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cache I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty query")]
    EmptyQuery,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An image search backend.
pub trait SearchProvider: Sync {
    fn name(&self) -> &str;

    /// Ordered candidate image URLs for `query`, starting at result `offset`.
    /// An empty page means the results are exhausted.
    fn search(&self, query: &str, offset: usize) -> Result<Vec<String>, ProviderError>;

    fn download(&self, url: &str) -> Result<Vec<u8>, ProviderError>;

    /// Live providers are rate limited; offline ones are not.
    fn is_live(&self) -> bool {
        false
    }
}

/// Deterministic provider over a fixed pool of fixture images.
///
/// A query maps to the pool by hashing, unless the override table names its
/// candidates explicitly. Candidate URLs have the form `fixture://<id>`;
/// ids absent from the pool answer `NotFound`. In strict mode unmapped
/// queries only yield unresolvable candidates.
pub struct OfflineProvider {
    pool: Vec<(String, Vec<u8>)>,
    overrides: HashMap<String, Vec<String>>,
    unreachable: Vec<String>,
    strict: bool,
    calls: AtomicUsize,
}

const FIXTURE_PREFIX: &str = "fixture://";

macro_rules! fixture_pool {
    ($($n:literal),*) => {
        [$(
            (concat!("pool_", $n), include_bytes!(concat!("../fixtures/images/pool_", $n, ".png")) as &[u8]),
        )*]
    };
}

static SHIPPED_POOL: [(&str, &[u8]); 12] =
    fixture_pool!("00", "01", "02", "03", "04", "05", "06", "07", "08", "09", "10", "11");

impl OfflineProvider {
    pub fn new(pool: Vec<(String, Vec<u8>)>) -> Self {
        Self {
            pool,
            overrides: HashMap::new(),
            unreachable: Vec::new(),
            strict: false,
            calls: AtomicUsize::new(0),
        }
    }

    /// The twelve PNG images shipped in `fixtures/images`.
    pub fn with_shipped_pool() -> Self {
        Self::new(
            SHIPPED_POOL
                .iter()
                .map(|(id, bytes)| (id.to_string(), bytes.to_vec()))
                .collect(),
        )
    }

    /// Candidate fixture ids for an exact (normalized) query.
    pub fn with_override(mut self, query: &str, ids: &[&str]) -> Self {
        self.overrides.insert(
            normalize_query(query),
            ids.iter().map(|s| s.to_string()).collect(),
        );
        self
    }

    /// Searches for this query fail as if the network were down.
    pub fn with_unreachable(mut self, query: &str) -> Self {
        self.unreachable.push(normalize_query(query));
        self
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    /// Number of `search` and `download` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn pool_ids(&self) -> impl Iterator<Item = &str> {
        self.pool.iter().map(|(id, _)| id.as_str())
    }

    fn candidates(&self, query: &str) -> Vec<String> {
        let norm = normalize_query(query);
        if let Some(ids) = self.overrides.get(&norm) {
            return ids.iter().map(|id| format!("{FIXTURE_PREFIX}{id}")).collect();
        }
        if self.strict || self.pool.is_empty() {
            let tag = &content_hash(norm.as_bytes())[..12];
            return (0..64).map(|i| format!("{FIXTURE_PREFIX}missing-{tag}-{i}")).collect();
        }
        let digest = Sha256::digest(norm.as_bytes());
        let start = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize
            % self.pool.len();
        (0..self.pool.len())
            .map(|i| {
                let (id, _) = &self.pool[(start + i) % self.pool.len()];
                format!("{FIXTURE_PREFIX}{id}")
            })
            .collect()
    }
}

impl SearchProvider for OfflineProvider {
    fn name(&self) -> &str {
        "offline"
    }

    fn search(&self, query: &str, offset: usize) -> Result<Vec<String>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.unreachable.contains(&normalize_query(query)) {
            return Err(ProviderError::Unreachable(format!("no route for {query:?}")));
        }
        const PAGE: usize = 8;
        Ok(self.candidates(query).into_iter().skip(offset).take(PAGE).collect())
    }

    fn download(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let id = url
            .strip_prefix(FIXTURE_PREFIX)
            .ok_or_else(|| ProviderError::Other(format!("not a fixture url: {url}")))?;
        self.pool
            .iter()
            .find(|(pid, _)| pid == id)
            .map(|(_, bytes)| bytes.clone())
            .ok_or_else(|| ProviderError::NotFound(url.to_owned()))
    }
}

/// HTTP search endpoint returning JSON.
///
/// `endpoint` may contain `{query}` and `{offset}` placeholders. The response
/// is either a JSON array of URLs, an object with a `urls` array, or an
/// object whose `value` array holds `{"contentUrl": ...}` entries.
pub struct HttpProvider {
    endpoint: String,
    api_key_header: Option<(String, String)>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(20)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key_header: None,
            agent,
        }
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.api_key_header = Some((name.into(), value.into()));
        self
    }

    fn get(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        let mut req = self.agent.get(url);
        if let Some((k, v)) = &self.api_key_header {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req
            .call()
            .map_err(|e| ProviderError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .body_mut()
                .read_to_vec()
                .map_err(|e| ProviderError::Unreachable(e.to_string())),
            404 | 410 => Err(ProviderError::NotFound(url.to_owned())),
            429 | 500..=599 => Err(ProviderError::Unreachable(format!("{url}: HTTP {status}"))),
            _ => Err(ProviderError::Other(format!("{url}: HTTP {status}"))),
        }
    }
}

fn encode_component(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            b' ' => out.push('+'),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

pub fn parse_search_response(body: &[u8]) -> Result<Vec<String>, ProviderError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| ProviderError::Other(e.to_string()))?;
    let strings = |v: &serde_json::Value| -> Vec<String> {
        v.as_array()
            .map(|a| a.iter().filter_map(|s| s.as_str().map(str::to_owned)).collect())
            .unwrap_or_default()
    };
    if value.is_array() {
        return Ok(strings(&value));
    }
    if let Some(urls) = value.get("urls") {
        return Ok(strings(urls));
    }
    if let Some(items) = value.get("value").and_then(|v| v.as_array()) {
        return Ok(items
            .iter()
            .filter_map(|it| it.get("contentUrl").and_then(|u| u.as_str()).map(str::to_owned))
            .collect());
    }
    Err(ProviderError::Other("unrecognized search response".into()))
}

impl SearchProvider for HttpProvider {
    fn name(&self) -> &str {
        "live"
    }

    fn search(&self, query: &str, offset: usize) -> Result<Vec<String>, ProviderError> {
        let url = self
            .endpoint
            .replace("{query}", &encode_component(query))
            .replace("{offset}", &offset.to_string());
        parse_search_response(&self.get(&url)?)
    }

    fn download(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        self.get(url)
    }

    fn is_live(&self) -> bool {
        true
    }
}

/// Minimum-interval limiter shared by all workers.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    /// `None` or a non-positive rate means unlimited.
    pub fn new(requests_per_second: Option<f64>) -> Self {
        let interval = match requests_per_second {
            Some(r) if r > 0.0 && r.is_finite() => Duration::from_secs_f64(1.0 / r),
            _ => Duration::ZERO,
        };
        Self {
            interval,
            next: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageStatus {
    Ok,
    Failed,
    Skipped,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub sid: usize,
    pub m: usize,
    pub query: String,
    pub url: Option<String>,
    pub path: Option<String>,
    pub hash: Option<String>,
    pub status: ImageStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub corpus_id: String,
    pub provider: String,
    pub created: String,
    pub per_sentence: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalManifest {
    pub meta: ManifestMeta,
    /// Sorted by `(sid, m)`.
    pub records: Vec<ImageRecord>,
}

impl RetrievalManifest {
    pub fn sentence(&self, sid: usize) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.sid == sid)
    }
}

pub fn normalize_query(query: &str) -> String {
    query
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Decodes `bytes` fully; "available" means this succeeds.
pub fn is_decodable_image(bytes: &[u8]) -> bool {
    image::guess_format(bytes).is_ok() && image::load_from_memory(bytes).is_ok()
}

/// MIME type sniffed from the leading bytes.
pub fn image_content_type(bytes: &[u8]) -> &'static str {
    image::guess_format(bytes).map_or("application/octet-stream", |f| f.to_mime_type())
}

fn image_extension(bytes: &[u8]) -> &'static str {
    image::guess_format(bytes)
        .ok()
        .and_then(|f| f.extensions_str().first().copied())
        .unwrap_or("bin")
}

#[derive(Debug, Clone)]
pub struct RetrieveOptions {
    /// Images per sentence.
    pub per_sentence: usize,
    /// Candidate failures tolerated before a slot is marked failed.
    pub max_failures: usize,
    /// Attempts per provider call when the provider is unreachable.
    pub retry_attempts: usize,
    pub backoff_base: Duration,
    /// Requests per second for live providers; ignored for offline ones.
    pub rate: Option<f64>,
    pub workers: usize,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            per_sentence: 5,
            max_failures: 5,
            retry_attempts: 3,
            backoff_base: Duration::from_millis(250),
            rate: Some(2.0),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchOutcome {
    Found { url: String, bytes: Vec<u8> },
    Failed { probes: usize },
}

fn with_retry<T>(
    opts: &RetrieveOptions,
    limiter: &RateLimiter,
    mut call: impl FnMut() -> Result<T, ProviderError>,
) -> Result<T, ProviderError> {
    let attempts = opts.retry_attempts.max(1);
    let mut delay = opts.backoff_base;
    for attempt in 1..=attempts {
        limiter.acquire();
        match call() {
            Err(ProviderError::Unreachable(msg)) if attempt < attempts => {
                log::warn!("attempt {attempt}/{attempts} failed: {msg}; retrying in {delay:?}");
                thread::sleep(delay);
                delay *= 2;
            }
            other => return other,
        }
    }
    unreachable!("loop returns on the last attempt")
}

/// Tries candidates in provider order and keeps the first decodable image.
pub fn fetch_first_available(
    provider: &dyn SearchProvider,
    query: &str,
    opts: &RetrieveOptions,
    limiter: &RateLimiter,
) -> Result<FetchOutcome, RetrievalError> {
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let mut failures = 0;
    let mut offset = 0;
    while failures < opts.max_failures {
        let page = match with_retry(opts, limiter, || provider.search(query, offset)) {
            Ok(page) => page,
            Err(e) => {
                log::warn!("search for {query:?} failed: {e}");
                return Ok(FetchOutcome::Failed { probes: failures });
            }
        };
        if page.is_empty() {
            break;
        }
        offset += page.len();
        for url in page {
            match with_retry(opts, limiter, || provider.download(&url)) {
                Ok(bytes) if is_decodable_image(&bytes) => {
                    return Ok(FetchOutcome::Found { url, bytes });
                }
                Ok(_) => log::debug!("{url}: not an image"),
                Err(e) => log::debug!("{url}: {e}"),
            }
            failures += 1;
            if failures >= opts.max_failures {
                break;
            }
        }
    }
    Ok(FetchOutcome::Failed { probes: failures })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    provider: String,
    query: String,
    rank: usize,
    status: ImageStatus,
    url: Option<String>,
    hash: Option<String>,
    file: Option<String>,
}

/// Result of a cache lookup or fresh fetch for one `(query, rank)` key.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Resolved {
    status: ImageStatus,
    url: Option<String>,
    path: Option<PathBuf>,
    hash: Option<String>,
}

/// On-disk cache: `index/<key>.json` entries and `images/<sha256>.<ext>` bytes.
pub struct ImageCache {
    root: PathBuf,
}

impl ImageCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RetrievalError> {
        let root = root.into();
        for sub in ["index", "images"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn key_path(&self, provider: &str, query: &str, rank: usize) -> PathBuf {
        let key = format!("{provider}\u{1f}{}\u{1f}{rank}", normalize_query(query));
        self.root
            .join("index")
            .join(format!("{}.json", &content_hash(key.as_bytes())[..32]))
    }

    fn lookup(&self, provider: &str, query: &str, rank: usize) -> Option<Resolved> {
        let raw = fs::read(self.key_path(provider, query, rank)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&raw).ok()?;
        if entry.provider != provider
            || entry.query != normalize_query(query)
            || entry.rank != rank
        {
            return None;
        }
        match entry.status {
            ImageStatus::Ok => {
                let path = self.root.join("images").join(entry.file.as_ref()?);
                let bytes = fs::read(&path).ok()?;
                if Some(content_hash(&bytes)) != entry.hash {
                    log::warn!("cache corruption at {}; refetching", path.display());
                    return None;
                }
                Some(Resolved {
                    status: ImageStatus::Ok,
                    url: entry.url,
                    path: Some(path),
                    hash: entry.hash,
                })
            }
            status => Some(Resolved {
                status,
                url: None,
                path: None,
                hash: None,
            }),
        }
    }

    fn store(
        &self,
        provider: &str,
        query: &str,
        rank: usize,
        outcome: &FetchOutcome,
    ) -> Result<Resolved, RetrievalError> {
        let (entry, resolved) = match outcome {
            FetchOutcome::Found { url, bytes } => {
                let hash = content_hash(bytes);
                let file = format!("{hash}.{}", image_extension(bytes));
                let path = self.root.join("images").join(&file);
                if content_hash(&fs::read(&path).unwrap_or_default()) != hash {
                    atomic_write(&path, bytes)?;
                }
                (
                    CacheEntry {
                        provider: provider.to_owned(),
                        query: normalize_query(query),
                        rank,
                        status: ImageStatus::Ok,
                        url: Some(url.clone()),
                        hash: Some(hash.clone()),
                        file: Some(file),
                    },
                    Resolved {
                        status: ImageStatus::Ok,
                        url: Some(url.clone()),
                        path: Some(path),
                        hash: Some(hash),
                    },
                )
            }
            FetchOutcome::Failed { .. } => (
                CacheEntry {
                    provider: provider.to_owned(),
                    query: normalize_query(query),
                    rank,
                    status: ImageStatus::Failed,
                    url: None,
                    hash: None,
                    file: None,
                },
                Resolved {
                    status: ImageStatus::Failed,
                    url: None,
                    path: None,
                    hash: None,
                },
            ),
        };
        let json = serde_json::to_vec(&entry).expect("cache entry serializes");
        atomic_write(&self.key_path(provider, query, rank), &json)?;
        Ok(resolved)
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), RetrievalError> {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RetrievalStats {
    pub fetched: usize,
    pub cache_hits: usize,
    pub ok: usize,
    pub failed: usize,
    pub skipped: usize,
}

/// Collects `per_sentence` images for every query set. Individual failures
/// become `failed` records; only cache I/O errors abort.
pub fn retrieve_for_corpus(
    provider: &dyn SearchProvider,
    query_sets: &[QuerySet],
    cache: &ImageCache,
    corpus_id: &str,
    opts: &RetrieveOptions,
) -> Result<(RetrievalManifest, RetrievalStats), RetrievalError> {
    let limiter = RateLimiter::new(if provider.is_live() { opts.rate } else { None });

    // unique (normalized query, rank) keys in first-seen order
    let mut keys: Vec<(String, usize)> = Vec::new();
    let mut key_index: HashMap<(String, usize), usize> = HashMap::new();
    for set in query_sets {
        for (i, q) in set.queries.iter().take(opts.per_sentence).enumerate() {
            let key = (normalize_query(q), i + 1);
            if !key_index.contains_key(&key) && !key.0.is_empty() {
                key_index.insert(key.clone(), keys.len());
                keys.push(key);
            }
        }
    }

    let results: Mutex<Vec<Option<Resolved>>> = Mutex::new(vec![None; keys.len()]);
    let stats = Mutex::new(RetrievalStats::default());
    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<RetrievalError>> = Mutex::new(None);

    thread::scope(|scope| {
        for _ in 0..opts.workers.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= keys.len() || first_error.lock().expect("poisoned").is_some() {
                    break;
                }
                let (query, rank) = &keys[i];
                let resolved = match cache.lookup(provider.name(), query, *rank) {
                    Some(hit) => {
                        stats.lock().expect("poisoned").cache_hits += 1;
                        Ok(hit)
                    }
                    None => fetch_first_available(provider, query, opts, &limiter).and_then(
                        |outcome| {
                            stats.lock().expect("poisoned").fetched += 1;
                            cache.store(provider.name(), query, *rank, &outcome)
                        },
                    ),
                };
                match resolved {
                    Ok(r) => results.lock().expect("poisoned")[i] = Some(r),
                    Err(e) => {
                        first_error.lock().expect("poisoned").get_or_insert(e);
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("poisoned") {
        return Err(e);
    }
    let results = results.into_inner().expect("poisoned");
    let mut stats = stats.into_inner().expect("poisoned");

    let mut records = Vec::with_capacity(query_sets.len() * opts.per_sentence);
    let mut by_sid: BTreeMap<usize, &QuerySet> = BTreeMap::new();
    for set in query_sets {
        by_sid.insert(set.sid, set);
    }
    for (&sid, set) in &by_sid {
        for m in 1..=opts.per_sentence {
            let query = set.queries.get(m - 1).cloned().unwrap_or_default();
            let resolved = key_index
                .get(&(normalize_query(&query), m))
                .and_then(|&i| results[i].clone());
            let record = match resolved {
                Some(r) => ImageRecord {
                    sid,
                    m,
                    query,
                    url: r.url,
                    path: r.path.map(|p| p.to_string_lossy().into_owned()),
                    hash: r.hash,
                    status: r.status,
                },
                None => ImageRecord {
                    sid,
                    m,
                    query,
                    url: None,
                    path: None,
                    hash: None,
                    status: ImageStatus::Skipped,
                },
            };
            match record.status {
                ImageStatus::Ok => stats.ok += 1,
                ImageStatus::Failed => stats.failed += 1,
                ImageStatus::Skipped => stats.skipped += 1,
            }
            records.push(record);
        }
    }

    let manifest = RetrievalManifest {
        meta: ManifestMeta {
            corpus_id: corpus_id.to_owned(),
            provider: provider.name().to_owned(),
            created: chrono::Utc::now().to_rfc3339(),
            per_sentence: opts.per_sentence,
        },
        records,
    };
    Ok((manifest, stats))
}

/// Path of the metadata sidecar next to a manifest file.
pub fn meta_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("meta.json")
}

pub fn write_manifest(path: &Path, manifest: &RetrievalManifest) -> Result<(), RetrievalError> {
    let mut buf = Vec::new();
    for rec in &manifest.records {
        serde_json::to_writer(&mut buf, rec).expect("record serializes");
        buf.push(b'\n');
    }
    atomic_write(path, &buf)?;
    let meta = serde_json::to_vec_pretty(&manifest.meta).expect("meta serializes");
    atomic_write(&meta_path(path), &meta)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>, RetrievalError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|source| RetrievalError::Parse { line: i + 1, source })?,
        );
    }
    Ok(records)
}

/// Writes records as manifest lines to any writer.
pub fn write_records<W: Write>(mut out: W, records: &[ImageRecord]) -> io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
