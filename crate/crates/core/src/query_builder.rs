//! TF-IDF term ranking and search-query synthesis.
//!
//! Every filtered source sentence is one document. A term's score in
//! document `i` is its relative frequency times `ln(N / (1 + df))`, where `N`
//! is the number of training sentences and `df` the number of documents
//! that contain it. The score can be negative for very common terms and is
//! kept that way.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{filter_stopwords, StopwordList};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("no documents: every training sentence is empty after stopword filtering")]
    NoDocuments,
    #[error("document {0} does not exist")]
    UnknownDocument(usize),
    #[error("token {token:?} does not occur in document {sid}")]
    TokenAbsent { sid: usize, token: String },
    #[error("document {0} is empty after stopword filtering")]
    EmptyDocument(usize),
    #[error("cannot build queries from an empty term list")]
    EmptyRanking,
    #[error("query count must be at least 1")]
    ZeroQueries,
    #[error("queries file: {0}")]
    Io(#[from] io::Error),
    #[error("queries file line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Raw term counts for one document, in first-occurrence order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermCounts {
    terms: Vec<(String, usize)>,
    total: usize,
}

impl TermCounts {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut terms: Vec<(String, usize)> = Vec::new();
        for tok in tokens {
            let tok = tok.as_ref();
            match index.get(tok) {
                Some(&i) => terms[i].1 += 1,
                None => {
                    index.insert(tok, terms.len());
                    terms.push((tok.to_owned(), 1));
                }
            }
        }
        Self {
            terms,
            total: tokens.len(),
        }
    }

    pub fn count(&self, token: &str) -> Option<usize> {
        self.terms.iter().find(|(t, _)| t == token).map(|(_, c)| *c)
    }

    /// Distinct terms with their counts, first occurrence first.
    pub fn terms(&self) -> &[(String, usize)] {
        &self.terms
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

#[derive(Debug, Clone)]
pub struct TfidfModel {
    doc_freq: HashMap<String, usize>,
    docs: Vec<TermCounts>,
}

impl TfidfModel {
    /// Fits document frequencies over the stopword-filtered source sentences.
    pub fn fit<'a, I, S>(sources: I, stops: &StopwordList) -> Result<Self, QueryError>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let docs: Vec<TermCounts> = sources
            .into_iter()
            .map(|s| TermCounts::from_tokens(&filter_stopwords(s, stops)))
            .collect();
        if docs.iter().all(TermCounts::is_empty) {
            return Err(QueryError::NoDocuments);
        }
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in &docs {
            for (term, _) in doc.terms() {
                *doc_freq.entry(term.clone()).or_insert(0) += 1;
            }
        }
        Ok(Self { doc_freq, docs })
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_freq(&self, token: &str) -> usize {
        self.doc_freq.get(token).copied().unwrap_or(0)
    }

    pub fn document(&self, sid: usize) -> Option<&TermCounts> {
        self.docs.get(sid)
    }

    pub fn idf(&self, token: &str) -> f64 {
        (self.num_docs() as f64 / (1.0 + self.doc_freq(token) as f64)).ln()
    }

    /// Score of `token` in training document `sid`.
    pub fn score(&self, sid: usize, token: &str) -> Result<f64, QueryError> {
        let doc = self.docs.get(sid).ok_or(QueryError::UnknownDocument(sid))?;
        self.score_in(doc, token).ok_or_else(|| QueryError::TokenAbsent {
            sid,
            token: token.to_owned(),
        })
    }

    /// Score of `token` in a document outside the training set, using the
    /// fitted document frequencies.
    pub fn score_in(&self, doc: &TermCounts, token: &str) -> Option<f64> {
        let n = doc.count(token)?;
        Some(n as f64 / doc.total() as f64 * self.idf(token))
    }

    pub fn rank_terms(&self, sid: usize) -> Result<Vec<String>, QueryError> {
        let doc = self.docs.get(sid).ok_or(QueryError::UnknownDocument(sid))?;
        if doc.is_empty() {
            return Err(QueryError::EmptyDocument(sid));
        }
        Ok(self.rank_document(doc))
    }

    /// Distinct terms by descending score; ties keep sentence order.
    pub fn rank_document(&self, doc: &TermCounts) -> Vec<String> {
        let scored: Vec<(&str, f64)> = doc
            .terms()
            .iter()
            .map(|(t, n)| (t.as_str(), *n as f64 / doc.total() as f64 * self.idf(t)))
            .collect();
        rank_by(scored)
    }
}

fn rank_by(scored: Vec<(&str, f64)>) -> Vec<String> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    // stable sort keeps first-occurrence order among equal scores
    order.sort_by(|&a, &b| {
        scored[b]
            .1
            .partial_cmp(&scored[a].1)
            .unwrap_or(Ordering::Equal)
    });
    order.into_iter().map(|i| scored[i].0.to_owned()).collect()
}

/// Ranks the raw (unfiltered) tokens by term frequency. Used when a sentence
/// consists only of stopwords.
pub fn rank_by_frequency<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let counts = TermCounts::from_tokens(tokens);
    rank_by(
        counts
            .terms()
            .iter()
            .map(|(t, n)| (t.as_str(), *n as f64))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryMode {
    /// `q_j` joins the first `j` ranked terms.
    #[default]
    Concat,
    /// `q_j` is the `j`-th ranked term alone.
    Single,
}

impl std::str::FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(Self::Concat),
            "single" => Ok(Self::Single),
            other => Err(format!("unknown query mode {other:?} (expected concat|single)")),
        }
    }
}

/// Builds `m` queries, cycling the ranked list when it is shorter than `m`.
pub fn build_queries<S: AsRef<str>>(
    ranked: &[S],
    m: usize,
    mode: QueryMode,
) -> Result<Vec<String>, QueryError> {
    if ranked.is_empty() {
        return Err(QueryError::EmptyRanking);
    }
    if m == 0 {
        return Err(QueryError::ZeroQueries);
    }
    let extended = ranked.iter().map(AsRef::as_ref).cycle().take(m);
    let mut queries = Vec::with_capacity(m);
    let mut current = String::new();
    for term in extended {
        match mode {
            QueryMode::Concat => {
                if !current.is_empty() {
                    current.push(' ');
                }
                current.push_str(term);
                queries.push(current.clone());
            }
            QueryMode::Single => queries.push(term.to_owned()),
        }
    }
    Ok(queries)
}

/// One line of `queries.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub sid: usize,
    pub ranked: Vec<String>,
    pub queries: Vec<String>,
    pub fallback: bool,
}

/// Ranks and builds the queries for one sentence. `doc` is the filtered
/// document; an empty one takes the raw-frequency fallback.
pub fn query_set_for<S: AsRef<str>>(
    model: &TfidfModel,
    sid: usize,
    raw_tokens: &[S],
    doc: &TermCounts,
    m: usize,
    mode: QueryMode,
) -> Result<QuerySet, QueryError> {
    let (ranked, fallback) = if doc.is_empty() {
        (rank_by_frequency(raw_tokens), true)
    } else {
        (model.rank_document(doc), false)
    };
    let queries = build_queries(&ranked, m, mode)?;
    Ok(QuerySet {
        sid,
        ranked,
        queries,
        fallback,
    })
}

/// Query sets for the sentences the model was fitted on.
pub fn build_training_queries<S: AsRef<str>>(
    model: &TfidfModel,
    sources: &[Vec<S>],
    m: usize,
    mode: QueryMode,
) -> Result<Vec<QuerySet>, QueryError> {
    sources
        .iter()
        .enumerate()
        .map(|(sid, raw)| {
            let doc = model.document(sid).ok_or(QueryError::UnknownDocument(sid))?;
            query_set_for(model, sid, raw, doc, m, mode)
        })
        .collect()
}

/// Query sets for held-out sentences scored against the fitted statistics.
pub fn build_heldout_queries<S: AsRef<str>>(
    model: &TfidfModel,
    sources: &[Vec<S>],
    stops: &StopwordList,
    m: usize,
    mode: QueryMode,
) -> Result<Vec<QuerySet>, QueryError> {
    sources
        .iter()
        .enumerate()
        .map(|(sid, raw)| {
            let doc = TermCounts::from_tokens(&filter_stopwords(raw, stops));
            query_set_for(model, sid, raw, &doc, m, mode)
        })
        .collect()
}

pub fn write_queries(path: impl AsRef<Path>, sets: &[QuerySet]) -> Result<(), QueryError> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for set in sets {
        serde_json::to_writer(&mut out, set).map_err(io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<QuerySet>, QueryError> {
    let reader = io::BufReader::new(fs::File::open(path)?);
    let mut sets = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        sets.push(
            serde_json::from_str(&line).map_err(|source| QueryError::Parse { line: i + 1, source })?,
        );
    }
    Ok(sets)
}
