#![allow(dead_code)]

use mmt_core::corpus::{load_parallel_corpus, ParallelCorpus, StopwordList};
use mmt_core::features::{assemble_bundles, mock_extract_manifest, FeatureBundle, FeatureStore};
use mmt_core::query_builder::{build_heldout_queries, build_training_queries, QueryMode, TfidfModel};
use mmt_core::retrieval::{retrieve_for_corpus, ImageCache, OfflineProvider, RetrieveOptions};
use mmt_core::trainer::{Experiment, TrainConfig};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub corpora: [ParallelCorpus; 3],
    pub bundles: [Vec<FeatureBundle>; 3],
}

/// The shipped corpus with offline retrieval and 4×16 mock features.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = mmt_core::fixtures_dir().join("corpus");
    let load = |s: &str| load_parallel_corpus(root.join(format!("{s}.en")), root.join(format!("{s}.de"))).unwrap();
    let corpora = [load("train"), load("dev"), load("test")];
    let stops = StopwordList::english();
    let model = TfidfModel::fit(corpora[0].sources(), &stops).unwrap();
    let provider = OfflineProvider::with_shipped_pool();
    let cache = ImageCache::open(dir.path().join("cache")).unwrap();
    let mut manifests = Vec::new();
    for (k, corpus) in corpora.iter().enumerate() {
        let sources: Vec<Vec<String>> = corpus.sources().map(<[String]>::to_vec).collect();
        let sets = if k == 0 {
            build_training_queries(&model, &sources, 5, QueryMode::Concat).unwrap()
        } else {
            build_heldout_queries(&model, &sources, &stops, 5, QueryMode::Concat).unwrap()
        };
        let (manifest, _) = retrieve_for_corpus(&provider, &sets, &cache, "fixture", &RetrieveOptions::default()).unwrap();
        manifests.push(manifest.records);
    }
    let feats = dir.path().join("feats");
    mock_extract_manifest(&manifests.concat(), &feats, 4, 16).unwrap();
    let store = FeatureStore::load(&feats).unwrap();
    let b: Vec<_> = manifests
        .iter()
        .map(|m| assemble_bundles(m, &store, 5, (4, 16)).unwrap())
        .collect();
    let [b0, b1, b2]: [_; 3] = b.try_into().unwrap();
    Fixture {
        dir,
        corpora,
        bundles: [b0, b1, b2],
    }
}

impl Fixture {
    pub fn experiment(&self) -> Experiment {
        let [a, b, c] = &self.corpora;
        Experiment::new([a, b, c], self.bundles.clone(), 1)
    }

    /// Training pairs used as dev and test too.
    pub fn memorization(&self) -> Experiment {
        let t = &self.corpora[0];
        let b = self.bundles[0].clone();
        Experiment::new([t, t, t], [b.clone(), b.clone(), b], 1)
    }
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        emb_dim: 16,
        enc_hidden: 16,
        dec_hidden: 32,
        att_dim: 16,
        readout_dim: 16,
        max_decode_len: 20,
        seeds: vec![11],
        parallel_seeds: false,
        ..TrainConfig::default()
    }
}
