//! Region-feature matrices and the FEAT file format.
//!
//! A FEAT file is the magic `FEAT`, the row count and column count as
//! little-endian `u32`, then `rows * cols` little-endian `f32` values in
//! row-major order. Matrices are held as `f64` in memory.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::retrieval::{atomic_write, ImageRecord, ImageStatus, RetrievalError};

pub const FEAT_MAGIC: [u8; 4] = *b"FEAT";
pub const DEFAULT_ROWS: usize = 196;
pub const DEFAULT_COLS: usize = 1024;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic at offset 0: expected \"FEAT\", found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated header: {len} bytes, need 12")]
    TruncatedHeader { len: usize },
    #[error("dimension overflow at offset 4: {rows} x {cols}")]
    DimensionOverflow { rows: u64, cols: u64 },
    #[error("truncated payload at offset {offset}: expected {expected} bytes total, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{extra} trailing bytes after offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("matrix must have at least one row and one column, got {rows} x {cols}")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("value count {len} does not match {rows} x {cols}")]
    ValueCount { rows: usize, cols: usize, len: usize },
    #[error("sentence {sid}: no feature file for image {hash}")]
    MissingFeatures { sid: usize, hash: String },
    #[error("sentence {sid}: record m={m} is ok but has no content hash")]
    MissingHash { sid: usize, m: usize },
    #[error("sentence {sid}: feature dims {found:?} differ from {expected:?}")]
    DimensionMismatch {
        sid: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("sentence {sid} has {available} images, {needed} requested")]
    InsufficientImages {
        sid: usize,
        available: usize,
        needed: usize,
    },
    #[error("features index line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, FeatureError> {
        if rows == 0 || cols == 0 {
            return Err(FeatureError::EmptyMatrix { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(FeatureError::ValueCount {
                rows,
                cols,
                len: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { index });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(&FEAT_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.len() < 12 {
            if bytes.len() >= 4 && bytes[..4] != FEAT_MAGIC {
                return Err(FeatureError::BadMagic {
                    found: bytes[..4].to_vec(),
                });
            }
            return Err(FeatureError::TruncatedHeader { len: bytes.len() });
        }
        if bytes[..4] != FEAT_MAGIC {
            return Err(FeatureError::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as u64;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as u64;
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(12))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or(FeatureError::DimensionOverflow { rows, cols })?;
        if bytes.len() < expected {
            // offset of the first value that is not fully present
            let offset = 12 + (bytes.len() - 12) / 4 * 4;
            return Err(FeatureError::TruncatedPayload {
                offset,
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(FeatureError::TrailingBytes {
                offset: expected,
                extra: bytes.len() - expected,
            });
        }
        let values = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::new(rows as usize, cols as usize, values)
    }
}

pub fn write_feature_file(path: impl AsRef<Path>, matrix: &FeatureMatrix) -> Result<(), FeatureError> {
    atomic_write(path.as_ref(), &matrix.to_bytes())?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix, FeatureError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    FeatureMatrix::from_bytes(&bytes)
}

/// Deterministic stand-in for a CNN feature extractor: i.i.d. uniform values
/// in `[-1, 1]` from a ChaCha stream keyed by the image content hash.
/// Values are drawn at 32-bit precision so they survive a FEAT round trip.
pub fn mock_extract(content_hash: &str, rows: usize, cols: usize) -> FeatureMatrix {
    let seed: [u8; 32] = Sha256::digest(content_hash.as_bytes()).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let values = (0..rows * cols)
        .map(|_| f64::from(rng.random_range(-1.0f32..=1.0)))
        .collect();
    FeatureMatrix { rows, cols, values }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotFlag {
    Real,
    Mock,
    Blank,
    Shuffled,
}

/// One line of `features.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndexEntry {
    pub hash: String,
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub flag: SlotFlag,
}

/// Image hash to FEAT file lookup, loaded from `features.jsonl`.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    entries: HashMap<String, FeatureIndexEntry>,
    base: PathBuf,
}

impl FeatureStore {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let dir = dir.as_ref();
        let index = dir.join("features.jsonl");
        let file = fs::File::open(&index).map_err(|source| FeatureError::Io {
            path: index.clone(),
            source,
        })?;
        let mut entries = HashMap::new();
        for (i, line) in io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| FeatureError::Io {
                path: index.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FeatureIndexEntry = serde_json::from_str(&line)
                .map_err(|source| FeatureError::Parse { line: i + 1, source })?;
            entries.insert(entry.hash.clone(), entry);
        }
        Ok(Self {
            entries,
            base: dir.to_path_buf(),
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = &FeatureIndexEntry> {
        self.entries.values()
    }

    pub fn get(&self, hash: &str) -> Option<&FeatureIndexEntry> {
        self.entries.get(hash)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read(&self, hash: &str) -> Option<Result<(FeatureMatrix, SlotFlag), FeatureError>> {
        let entry = self.entries.get(hash)?;
        let path = self.base.join(&entry.path);
        Some(read_feature_file(path).map(|m| (m, entry.flag)))
    }
}

/// Writes mock features for every distinct ok image of the manifests and
/// the `features.jsonl` index. Existing files are reused.
pub fn mock_extract_manifest(
    records: &[ImageRecord],
    out_dir: &Path,
    rows: usize,
    cols: usize,
) -> Result<Vec<FeatureIndexEntry>, FeatureError> {
    fs::create_dir_all(out_dir).map_err(|source| FeatureError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut seen = std::collections::BTreeSet::new();
    let mut entries = Vec::new();
    for rec in records.iter().filter(|r| r.status == ImageStatus::Ok) {
        let hash = rec
            .hash
            .clone()
            .ok_or(FeatureError::MissingHash { sid: rec.sid, m: rec.m })?;
        if !seen.insert(hash.clone()) {
            continue;
        }
        let file = format!("{hash}.feat");
        let path = out_dir.join(&file);
        let fresh = match read_feature_file(&path) {
            Ok(existing) => existing.dims() != (rows, cols),
            Err(_) => true,
        };
        if fresh {
            write_feature_file(&path, &mock_extract(&hash, rows, cols))?;
        }
        entries.push(FeatureIndexEntry {
            hash,
            path: file,
            rows,
            cols,
            flag: SlotFlag::Mock,
        });
    }
    write_index(out_dir, &entries)?;
    Ok(entries)
}

/// Validates externally produced FEAT files listed in `src_dir/features.jsonl`
/// and copies them, with a normalized index, into `out_dir`.
pub fn import_features(src_dir: &Path, out_dir: &Path) -> Result<Vec<FeatureIndexEntry>, FeatureError> {
    let store = FeatureStore::load(src_dir)?;
    fs::create_dir_all(out_dir).map_err(|source| FeatureError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut entries: Vec<FeatureIndexEntry> = store.entries().cloned().collect();
    entries.sort_by(|a, b| a.hash.cmp(&b.hash));
    for entry in &mut entries {
        let matrix = read_feature_file(src_dir.join(&entry.path))?;
        let file = format!("{}.feat", entry.hash);
        write_feature_file(out_dir.join(&file), &matrix)?;
        entry.path = file;
        entry.rows = matrix.rows();
        entry.cols = matrix.cols();
        entry.flag = SlotFlag::Real;
    }
    write_index(out_dir, &entries)?;
    Ok(entries)
}

fn write_index(dir: &Path, entries: &[FeatureIndexEntry]) -> Result<(), FeatureError> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).expect("index entry serializes");
        buf.write_all(b"\n").expect("vec write");
    }
    atomic_write(&dir.join("features.jsonl"), &buf)?;
    Ok(())
}

/// The `m` feature matrices attached to one source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub sid: usize,
    matrices: Vec<FeatureMatrix>,
    flags: Vec<SlotFlag>,
}

impl FeatureBundle {
    pub fn new(
        sid: usize,
        matrices: Vec<FeatureMatrix>,
        flags: Vec<SlotFlag>,
    ) -> Result<Self, FeatureError> {
        assert_eq!(matrices.len(), flags.len(), "one flag per matrix");
        if let Some(first) = matrices.first() {
            if let Some(bad) = matrices.iter().find(|m| m.dims() != first.dims()) {
                return Err(FeatureError::DimensionMismatch {
                    sid,
                    expected: first.dims(),
                    found: bad.dims(),
                });
            }
        }
        Ok(Self {
            sid,
            matrices,
            flags,
        })
    }

    pub fn blank(sid: usize, m: usize, rows: usize, cols: usize) -> Self {
        Self {
            sid,
            matrices: vec![FeatureMatrix::zeros(rows, cols); m],
            flags: vec![SlotFlag::Blank; m],
        }
    }

    pub fn matrices(&self) -> &[FeatureMatrix] {
        &self.matrices
    }

    pub fn flags(&self) -> &[SlotFlag] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.matrices.first().map(FeatureMatrix::dims)
    }

    /// Keeps the first `m` images.
    pub fn truncated(&self, m: usize) -> Result<Self, FeatureError> {
        if m > self.len() {
            return Err(FeatureError::InsufficientImages {
                sid: self.sid,
                available: self.len(),
                needed: m,
            });
        }
        Ok(Self {
            sid: self.sid,
            matrices: self.matrices[..m].to_vec(),
            flags: self.flags[..m].to_vec(),
        })
    }

    /// Same images with every slot replaced by zeros.
    pub fn blanked(&self) -> Self {
        let (r, c) = self.dims().unwrap_or((1, 1));
        Self::blank(self.sid, self.len(), r, c)
    }

    /// Re-attach these images to another sentence.
    pub fn reassigned(&self, sid: usize) -> Self {
        Self {
            sid,
            matrices: self.matrices.clone(),
            flags: vec![SlotFlag::Shuffled; self.len()],
        }
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            sid: self.sid,
            matrices: order.iter().map(|&i| self.matrices[i].clone()).collect(),
            flags: order.iter().map(|&i| self.flags[i]).collect(),
        }
    }
}

/// Builds one bundle per sentence with images in query-rank order. Failed
/// or skipped slots become zero matrices.
pub fn assemble_bundles(
    records: &[ImageRecord],
    store: &FeatureStore,
    m: usize,
    dims: (usize, usize),
) -> Result<Vec<FeatureBundle>, FeatureError> {
    let mut by_sid: std::collections::BTreeMap<usize, Vec<&ImageRecord>> = Default::default();
    for rec in records {
        by_sid.entry(rec.sid).or_default().push(rec);
    }
    let mut bundles = Vec::with_capacity(by_sid.len());
    for (sid, mut recs) in by_sid {
        recs.sort_by_key(|r| r.m);
        if recs.len() < m {
            return Err(FeatureError::InsufficientImages {
                sid,
                available: recs.len(),
                needed: m,
            });
        }
        let mut matrices = Vec::with_capacity(m);
        let mut flags = Vec::with_capacity(m);
        for rec in recs.into_iter().take(m) {
            if rec.status == ImageStatus::Ok {
                let hash = rec.hash.as_ref().ok_or(FeatureError::MissingHash { sid, m: rec.m })?;
                let (matrix, flag) = store.read(hash).ok_or_else(|| FeatureError::MissingFeatures {
                    sid,
                    hash: hash.clone(),
                })??;
                if matrix.dims() != dims {
                    return Err(FeatureError::DimensionMismatch {
                        sid,
                        expected: dims,
                        found: matrix.dims(),
                    });
                }
                matrices.push(matrix);
                flags.push(flag);
            } else {
                matrices.push(FeatureMatrix::zeros(dims.0, dims.1));
                flags.push(SlotFlag::Blank);
            }
        }
        bundles.push(FeatureBundle::new(sid, matrices, flags)?);
    }
    Ok(bundles)
}
