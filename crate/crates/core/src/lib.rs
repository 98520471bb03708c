//! Retrieval-augmented multimodal machine translation.
//!
//! The pipeline runs in stages, each backed by one module:
//!
//! 1. [`corpus`] loads and tokenizes parallel text.
//! 2. [`query_builder`] ranks source terms by TF-IDF and synthesizes the
//!    concatenated image-search queries for every sentence.
//! 3. [`retrieval`] collects the first available image per query through a
//!    [`retrieval::SearchProvider`], with an on-disk cache.
//! 4. [`features`] turns images into region-feature matrices (FEAT files).
//! 5. [`model`] is the translation network: bi-GRU text encoder, text-aware
//!    attentive visual encoder, bi-directional attention and a doubly
//!    attentive conditional GRU decoder, built on [`numeric`].
//! 6. [`trainer`] and [`evaluator`] run training, BLEU scoring, ablations and
//!    the image-count sweep.
//! 7. [`annotation`] backs the manual noise-image labeling workflow.

pub mod annotation;
pub mod corpus;
pub mod evaluator;
pub mod features;
pub mod model;
pub mod numeric;
pub mod query_builder;
pub mod retrieval;
pub mod trainer;

/// Directory holding the fixture files shipped with the crate.
pub fn fixtures_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}
