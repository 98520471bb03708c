//! Manual noise-image labeling: seeded sampling of retrieved images, a
//! durable append-only label log, and running statistics.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluator::{ImageLabel, NoiseReport};
use crate::retrieval::{atomic_write, ImageRecord, ImageStatus};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("requested a sample of {requested} but only {available} ok records exist")]
    TooFewRecords { requested: usize, available: usize },
    #[error("item sid={sid} m={m} is not part of this session")]
    UnknownItem { sid: usize, m: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("session file {path} belongs to session {found}, expected {expected}")]
    SessionMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnotationError + '_ {
    move |source| AnnotationError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemKey {
    pub sid: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledItem {
    pub sid: usize,
    pub m: usize,
    pub query: String,
    pub path: String,
    pub hash: Option<String>,
}

impl SampledItem {
    pub fn key(&self) -> ItemKey {
        ItemKey {
            sid: self.sid,
            m: self.m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub id: String,
    pub seed: u64,
    pub sample_size: usize,
    pub items: Vec<SampledItem>,
}

/// Draws `size` distinct ok records uniformly at random. The session id is
/// derived from the sampled keys and seed, so equal inputs give equal ids.
pub fn create_session(records: &[ImageRecord], size: usize, seed: u64) -> Result<AnnotationSession, AnnotationError> {
    let ok: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.status == ImageStatus::Ok && r.path.is_some())
        .collect();
    if ok.len() < size {
        return Err(AnnotationError::TooFewRecords {
            requested: size,
            available: ok.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<SampledItem> = sample(&mut rng, ok.len(), size)
        .into_iter()
        .map(|i| {
            let r = ok[i];
            SampledItem {
                sid: r.sid,
                m: r.m,
                query: r.query.clone(),
                path: r.path.clone().unwrap_or_default(),
                hash: r.hash.clone(),
            }
        })
        .collect();
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for it in &items {
        h.update(format!("{}:{};", it.sid, it.m));
    }
    let id = hex::encode(h.finalize())[..12].to_owned();
    Ok(AnnotationSession {
        id,
        seed,
        sample_size: size,
        items,
    })
}

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub sid: usize,
    pub m: usize,
    pub label: ImageLabel,
    pub annotator: String,
    pub ts: String,
}

/// Replays a label log; later lines win. A torn final line (an append cut
/// short before it was acknowledged) is ignored.
pub fn read_label_log(path: &Path) -> Result<Vec<LabelRecord>, AnnotationError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let mut out = Vec::new();
    let last = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(rec) => out.push(rec),
            Err(_) if i + 1 == last => log::warn!("{}: ignoring torn final line", path.display()),
            Err(e) => {
                return Err(AnnotationError::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Current label per item after last-wins replay.
pub fn current_labels(log: &[LabelRecord]) -> HashMap<ItemKey, ImageLabel> {
    log.iter()
        .map(|r| (ItemKey { sid: r.sid, m: r.m }, r.label))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub total: usize,
    pub labeled: usize,
    pub remaining: usize,
    pub noise_count: usize,
    pub informative_count: usize,
    /// `noise_count / labeled`; 0 before any label.
    pub proportion: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum NextItem {
    Pending {
        index: usize,
        item: SampledItem,
    },
    Complete,
}

struct Inner {
    labels: HashMap<ItemKey, ImageLabel>,
    log: File,
}

/// A session bound to its directory (`session.json` + `labels.jsonl`).
/// Label writes are serialized and synced to disk before they return.
pub struct SessionStore {
    session: AnnotationSession,
    keys: HashSet<ItemKey>,
    log_path: PathBuf,
    inner: Mutex<Inner>,
}

impl SessionStore {
    /// Opens `dir`, writing `session.json` on first use and replaying any
    /// existing labels.
    pub fn open(dir: &Path, session: AnnotationSession) -> Result<Self, AnnotationError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = dir.join("session.json");
        if meta.exists() {
            let text = std::fs::read_to_string(&meta).map_err(io_err(&meta))?;
            let stored: AnnotationSession = serde_json::from_str(&text).map_err(|e| AnnotationError::Parse {
                path: meta.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
            if stored.id != session.id {
                return Err(AnnotationError::SessionMismatch {
                    path: meta,
                    expected: session.id,
                    found: stored.id,
                });
            }
        } else {
            let bytes = serde_json::to_vec_pretty(&session).expect("session serializes");
            atomic_write(&meta, &bytes).map_err(|e| AnnotationError::Io {
                path: meta.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
        }
        let log_path = dir.join("labels.jsonl");
        let keys: HashSet<ItemKey> = session.items.iter().map(SampledItem::key).collect();
        let labels = current_labels(&read_label_log(&log_path)?)
            .into_iter()
            .filter(|(k, _)| keys.contains(k))
            .collect();
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        Ok(Self {
            session,
            keys,
            log_path,
            inner: Mutex::new(Inner { labels, log }),
        })
    }

    pub fn session(&self) -> &AnnotationSession {
        &self.session
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    /// First unlabeled item in sampled order.
    pub fn next(&self) -> NextItem {
        let inner = self.inner.lock().expect("label lock");
        self.session
            .items
            .iter()
            .enumerate()
            .find(|(_, it)| !inner.labels.contains_key(&it.key()))
            .map_or(NextItem::Complete, |(index, item)| NextItem::Pending {
                index,
                item: item.clone(),
            })
    }

    pub fn item(&self, key: ItemKey) -> Option<&SampledItem> {
        self.session.items.iter().find(|it| it.key() == key)
    }

    /// Appends and syncs the label, then updates the in-memory view.
    pub fn label(&self, key: ItemKey, label: ImageLabel, annotator: &str) -> Result<SessionStats, AnnotationError> {
        if !self.keys.contains(&key) {
            return Err(AnnotationError::UnknownItem { sid: key.sid, m: key.m });
        }
        let record = LabelRecord {
            sid: key.sid,
            m: key.m,
            label,
            annotator: annotator.to_owned(),
            ts: chrono::Utc::now().to_rfc3339(),
        };
        let mut line = serde_json::to_vec(&record).expect("label serializes");
        line.push(b'\n');
        let mut inner = self.inner.lock().expect("label lock");
        inner
            .log
            .write_all(&line)
            .and_then(|_| inner.log.sync_data())
            .map_err(io_err(&self.log_path))?;
        inner.labels.insert(key, label);
        Ok(Self::stats_of(&self.session, &inner.labels))
    }

    pub fn stats(&self) -> SessionStats {
        let inner = self.inner.lock().expect("label lock");
        Self::stats_of(&self.session, &inner.labels)
    }

    fn stats_of(session: &AnnotationSession, labels: &HashMap<ItemKey, ImageLabel>) -> SessionStats {
        let labeled = labels.len();
        let noise = labels.values().filter(|l| **l == ImageLabel::Noise).count();
        let (proportion, percent) = match NoiseReport::from_counts(noise, labeled) {
            Ok(r) => (r.proportion, r.percent),
            Err(_) => (0.0, 0.0),
        };
        SessionStats {
            total: session.items.len(),
            labeled,
            remaining: session.items.len() - labeled,
            noise_count: noise,
            informative_count: labeled - noise,
            proportion,
            percent,
        }
    }
}
