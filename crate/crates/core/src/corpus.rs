//! Parallel corpora, tokenization, vocabularies and stopword filtering.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line count mismatch: source has {src} lines, target has {tgt} lines")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("sentence {sid} has an empty {side} side after normalization")]
    EmptySentence { sid: usize, side: &'static str },
}

/// Lowercases, splits on whitespace and isolates punctuation as separate tokens.
///
/// Hyphens and apostrophes between two alphanumeric characters stay inside
/// the word ("t-shirt", "don't"); every other non-alphanumeric character is
/// emitted as a token of its own.
pub fn tokenize_normalize(raw_line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in raw_line.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let joiner = (c == '-' || c == '\'')
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if c.is_alphanumeric() || joiner {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Case-insensitive stopword set.
#[derive(Debug, Clone, Default)]
pub struct StopwordList {
    words: HashSet<String>,
}

impl StopwordList {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            words: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// One word per line; blank lines are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(text.lines()))
    }

    /// The English list shipped in `fixtures/stopwords-en.txt`.
    pub fn english() -> Self {
        Self::new(include_str!("../fixtures/stopwords-en.txt").lines())
    }

    pub fn contains(&self, token: &str) -> bool {
        if self.words.is_empty() {
            return false;
        }
        self.words.contains(&token.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Keeps the tokens not in `stops`, preserving order.
pub fn filter_stopwords<S: AsRef<str>>(tokens: &[S], stops: &StopwordList) -> Vec<String> {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !stops.contains(t))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub sid: usize,
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    /// Builds a corpus from already tokenized pairs, assigning `sid` by position.
    pub fn from_tokens(pairs: Vec<(Vec<String>, Vec<String>)>) -> Result<Self, CorpusError> {
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(sid, (src_tokens, tgt_tokens))| {
                if src_tokens.is_empty() {
                    return Err(CorpusError::EmptySentence { sid, side: "source" });
                }
                if tgt_tokens.is_empty() {
                    return Err(CorpusError::EmptySentence { sid, side: "target" });
                }
                Ok(SentencePair {
                    sid,
                    src_tokens,
                    tgt_tokens,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { pairs })
    }

    pub fn from_lines<S: AsRef<str>>(src: &[S], tgt: &[S]) -> Result<Self, CorpusError> {
        if src.len() != tgt.len() {
            return Err(CorpusError::LineCountMismatch {
                src: src.len(),
                tgt: tgt.len(),
            });
        }
        Self::from_tokens(
            src.iter()
                .zip(tgt)
                .map(|(s, t)| (tokenize_normalize(s.as_ref()), tokenize_normalize(t.as_ref())))
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, sid: usize) -> Option<&SentencePair> {
        self.pairs.get(sid)
    }

    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.src_tokens.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.tgt_tokens.as_slice())
    }
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Loads two line-aligned files; `sid` is the zero-based line index.
pub fn load_parallel_corpus(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
) -> Result<ParallelCorpus, CorpusError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    ParallelCorpus::from_lines(&src, &tgt)
}

/// Loads a source-only file as tokenized sentences, rejecting blank lines.
pub fn load_monolingual(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>, CorpusError> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(sid, line)| {
            let tokens = tokenize_normalize(line);
            if tokens.is_empty() {
                Err(CorpusError::EmptySentence { sid, side: "source" })
            } else {
                Ok(tokens)
            }
        })
        .collect()
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token to id bijection with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by first appearance.
    pub fn build<'a, I, S>(sentences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for sentence in sentences {
            for tok in sentence {
                let tok = tok.as_ref();
                let c = counts.entry(tok).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        Self::from_tokens(
            order
                .into_iter()
                .filter(|t| counts[t] >= min_count.max(1))
                .map(str::to_owned),
        )
    }

    /// Reserved entries are prepended; duplicates and reserved names are skipped.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for tok in RESERVED.iter().map(|s| s.to_string()).chain(tokens) {
            if !vocab.ids.contains_key(&tok) {
                vocab.ids.insert(tok.clone(), vocab.tokens.len() as u32);
                vocab.tokens.push(tok);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Decodes ids, dropping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id > EOS)
            .filter_map(|&id| self.token(id).map(str::to_owned))
            .collect()
    }

    /// One token per line in id order, reserved entries included.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(text.lines().map(str::to_owned))
    }
}
