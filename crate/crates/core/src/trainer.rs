//! Mini-batch Adam training with dev-BLEU early stopping, and independent
//! multi-seed replicas averaged into a macro BLEU.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ParallelCorpus, Vocabulary};
use crate::evaluator::{bleu4, BleuReport, EvalError};
use crate::features::{FeatureBundle, FeatureError};
use crate::model::{bundle_tensors, Model, ModelConfig, ModelError};
use crate::numeric::{clip_global_norm, Adam, AdamConfig, NumericError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{split} split: {message}")]
    Data { split: &'static str, message: String },
    #[error("non-finite values at epoch {epoch}, batch {batch} ({group}): {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        group: String,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("scoring: {0}")]
    Eval(Box<EvalError>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        Self::Eval(Box::new(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub images_per_sentence: usize,
    pub clip_norm: f64,
    pub max_decode_len: usize,
    pub emb_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub att_dim: usize,
    pub readout_dim: usize,
    /// Run seeds on separate threads.
    pub parallel_seeds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 0.001,
            max_epochs: 15,
            patience: 3,
            seeds: vec![11, 22, 33, 44, 55],
            images_per_sentence: 5,
            clip_norm: 5.0,
            max_decode_len: 80,
            emb_dim: 256,
            enc_hidden: 256,
            dec_hidden: 512,
            att_dim: 512,
            readout_dim: 256,
            parallel_seeds: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let checks = [
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.patience >= 1, "patience must be at least 1"),
            (!self.seeds.is_empty(), "seeds must not be empty"),
            (self.max_epochs >= 1, "max_epochs must be at least 1"),
            (self.images_per_sentence >= 1, "images_per_sentence must be at least 1"),
            (self.max_decode_len >= 1, "max_decode_len must be at least 1"),
            (self.lr >= 0.0 && self.lr.is_finite(), "lr must be finite and non-negative"),
            (self.clip_norm > 0.0, "clip_norm must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(TrainError::Config((*msg).to_owned())),
            None => Ok(()),
        }
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize, feat_dim: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            emb_dim: self.emb_dim,
            enc_hidden: self.enc_hidden,
            dec_hidden: self.dec_hidden,
            feat_dim,
            att_dim: self.att_dim,
            readout_dim: self.readout_dim,
        }
    }
}

/// One corpus split: encoded pairs, reference tokens and image bundles,
/// index-aligned.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub refs: Vec<Vec<String>>,
    pub bundles: Vec<FeatureBundle>,
}

impl Split {
    pub fn new(corpus: &ParallelCorpus, bundles: Vec<FeatureBundle>, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Self {
        Self {
            src: corpus.sources().map(|s| src_vocab.encode(s)).collect(),
            tgt: corpus.targets().map(|t| tgt_vocab.encode(t)).collect(),
            refs: corpus.targets().map(<[String]>::to_vec).collect(),
            bundles,
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    fn check(&self, split: &'static str, m: usize) -> Result<(), TrainError> {
        let err = |message: String| TrainError::Data { split, message };
        if self.is_empty() {
            return Err(err("no sentences".into()));
        }
        if self.tgt.len() != self.len() || self.refs.len() != self.len() {
            return Err(err("source and target counts differ".into()));
        }
        if self.bundles.len() != self.len() {
            return Err(err(format!(
                "{} bundles for {} sentences",
                self.bundles.len(),
                self.len()
            )));
        }
        if let Some(b) = self.bundles.iter().find(|b| b.len() < m) {
            return Err(TrainError::Features(FeatureError::InsufficientImages {
                sid: b.sid,
                available: b.len(),
                needed: m,
            }));
        }
        Ok(())
    }

    /// Dense images of sentence `i`, cut to the first `m` slots.
    pub fn images(&self, i: usize, m: usize) -> Vec<Tensor> {
        let mut t = bundle_tensors(&self.bundles[i]);
        t.truncate(m);
        t
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train: Split,
    pub dev: Split,
    pub test: Split,
}

impl Experiment {
    /// Builds vocabularies from the training side and encodes all splits.
    pub fn new(
        corpora: [&ParallelCorpus; 3],
        bundles: [Vec<FeatureBundle>; 3],
        min_count: usize,
    ) -> Self {
        let src_vocab = Vocabulary::build(corpora[0].sources(), min_count);
        let tgt_vocab = Vocabulary::build(corpora[0].targets(), min_count);
        let [train_b, dev_b, test_b] = bundles;
        Self {
            train: Split::new(corpora[0], train_b, &src_vocab, &tgt_vocab),
            dev: Split::new(corpora[1], dev_b, &src_vocab, &tgt_vocab),
            test: Split::new(corpora[2], test_b, &src_vocab, &tgt_vocab),
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn feat_dim(&self) -> Option<usize> {
        self.train.bundles.first().and_then(|b| b.dims()).map(|(_, d)| d)
    }
}

/// Greedy translations of every sentence in `split`.
pub fn translate_split(model: &Model, split: &Split, m: usize, max_len: usize) -> Result<Vec<Vec<u32>>, TrainError> {
    (0..split.len())
        .map(|i| Ok(model.greedy_decode(&split.src[i], &split.images(i, m), max_len)?))
        .collect()
}

/// Corpus BLEU of the model's greedy output against the split references.
pub fn score_split(
    model: &Model,
    split: &Split,
    tgt_vocab: &Vocabulary,
    m: usize,
    max_len: usize,
) -> Result<(BleuReport, Vec<Vec<String>>), TrainError> {
    let hyps: Vec<Vec<String>> = translate_split(model, split, m, max_len)?
        .iter()
        .map(|ids| tgt_vocab.decode(ids))
        .collect();
    Ok((bleu4(&hyps, &split.refs)?, hyps))
}

/// Patience counter on a score that must strictly exceed the best so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_bleu: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub dev_bleu: Vec<f64>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_dev_bleu: f64,
    pub stopped_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub test: Option<BleuReport>,
}

impl RunRecord {
    pub fn test_bleu(&self) -> Option<f64> {
        self.test.as_ref().map(|t| t.bleu)
    }
}

pub struct TrainedRun {
    pub record: RunRecord,
    /// Parameters from the best dev epoch.
    pub model: Model,
}

fn group_of(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_owned()
}

/// Trains one replica. With `out_dir`, writes `run.jsonl`, `best.ckpt` and
/// `hparams.txt` there.
pub fn train_one_seed(
    exp: &Experiment,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainedRun, TrainError> {
    config.validate()?;
    let m = config.images_per_sentence;
    exp.train.check("train", m)?;
    exp.dev.check("dev", m)?;
    let feat_dim = exp.feat_dim().ok_or_else(|| TrainError::Data {
        split: "train",
        message: "bundles have no images".into(),
    })?;
    let model_config = config.model_config(exp.src_vocab.len(), exp.tgt_vocab.len(), feat_dim);
    let mut model = Model::new(model_config, seed);
    let names: Vec<String> = model.store.named().map(|(n, _)| n.to_owned()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.store.tensors(),
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);

    let train_images: Vec<Vec<Tensor>> = (0..exp.train.len()).map(|i| exp.train.images(i, m)).collect();

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("run.jsonl");
            Some((BufWriter::new(File::create(&path).map_err(io_err(&path))?), path))
        }
        None => None,
    };
    let ckpt_path = out_dir.map(|d| d.join("best.ckpt"));

    let mut stopper = EarlyStopping::new(config.patience);
    let mut record = RunRecord {
        seed,
        train_loss: Vec::new(),
        dev_bleu: Vec::new(),
        best_epoch: 0,
        best_dev_bleu: 0.0,
        stopped_epoch: 0,
        best_checkpoint: None,
        test: None,
    };
    let mut best_store = model.store.clone();
    let mut order: Vec<usize> = (0..exp.train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let fail = |group: String, detail: String| TrainError::NonFinite {
                epoch,
                batch: batch_no + 1,
                group,
                detail,
            };
            let mut grads: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (loss, g) = match model.loss_and_grads(&exp.train.src[i], &exp.train.tgt[i], &train_images[i]) {
                    Ok(v) => v,
                    Err(ModelError::Numeric(NumericError::NonFinite { op })) => {
                        return Err(fail(format!("forward:{op}"), format!("sentence {i}")));
                    }
                    Err(e) => return Err(e.into()),
                };
                loss_sum += loss;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let mut grads = grads.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(fail(group_of(&names[bad]), "non-finite gradient".into()));
            }
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(model.store.tensors_mut(), &grads, &name_refs)
                .map_err(|e| fail("adam".into(), e.to_string()))?;
            if let Some(bad) = model.store.tensors().iter().position(|t| !t.is_finite()) {
                return Err(fail(group_of(&names[bad]), "non-finite parameter after update".into()));
            }
        }
        let train_loss = loss_sum / exp.train.len() as f64;
        let (dev, _) = score_split(&model, &exp.dev, &exp.tgt_vocab, m, config.max_decode_len)?;
        let decision = stopper.observe(dev.bleu);
        record.train_loss.push(train_loss);
        record.dev_bleu.push(dev.bleu);
        record.stopped_epoch = epoch;
        if decision.improved {
            record.best_epoch = epoch;
            record.best_dev_bleu = dev.bleu;
            best_store = model.store.clone();
            if let Some(path) = &ckpt_path {
                let best = Model {
                    config: model.config,
                    store: best_store.clone(),
                    ids: model.ids,
                };
                best.save(path, &path.with_file_name("hparams.txt"))?;
                record.best_checkpoint = Some(path.clone());
            }
        }
        if let Some((w, path)) = &mut log {
            let line = EpochRecord {
                seed,
                epoch,
                train_loss,
                dev_bleu: dev.bleu,
                improved: decision.improved,
            };
            serde_json::to_writer(&mut *w, &line).expect("epoch record serializes");
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))?;
        }
        log::info!(
            "seed {seed} epoch {epoch}: train loss {train_loss:.4}, dev BLEU {:.2}{}",
            dev.bleu,
            if decision.improved { " (best)" } else { "" }
        );
        if decision.stop {
            break;
        }
    }

    model.store = best_store;
    if !exp.test.is_empty() {
        exp.test.check("test", m)?;
        let (test, _) = score_split(&model, &exp.test, &exp.tgt_vocab, m, config.max_decode_len)?;
        record.test = Some(test);
    }
    Ok(TrainedRun { record, model })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroReport {
    pub runs: Vec<RunRecord>,
    pub failures: Vec<SeedFailure>,
    /// Arithmetic mean of per-seed test BLEU over successful seeds.
    pub macro_bleu: Option<f64>,
    pub failed: bool,
}

/// `Σ x / n` in the given order.
pub fn macro_average(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Trains every configured seed independently (in parallel when enabled)
/// and averages test BLEU. A failing seed is reported, not fatal. With
/// `out_dir`, each seed writes to `seed_<s>/` and the summary goes to
/// `report.json`.
pub fn train_multi_seed(exp: &Experiment, config: &TrainConfig, out_dir: Option<&Path>) -> Result<MacroReport, TrainError> {
    config.validate()?;
    let dirs: Vec<Option<PathBuf>> = config
        .seeds
        .iter()
        .map(|s| out_dir.map(|d| d.join(format!("seed_{s}"))))
        .collect();
    let results: Vec<Result<RunRecord, TrainError>> = if config.parallel_seeds && config.seeds.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = config
                .seeds
                .iter()
                .zip(&dirs)
                .map(|(&seed, dir)| {
                    scope.spawn(move || train_one_seed(exp, config, seed, dir.as_deref()).map(|r| r.record))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        })
    } else {
        config
            .seeds
            .iter()
            .zip(&dirs)
            .map(|(&seed, dir)| train_one_seed(exp, config, seed, dir.as_deref()).map(|r| r.record))
            .collect()
    };

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, res) in config.seeds.iter().zip(results) {
        match res {
            Ok(r) => runs.push(r),
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push(SeedFailure {
                    seed: *seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let scores: Vec<f64> = runs.iter().filter_map(RunRecord::test_bleu).collect();
    let report = MacroReport {
        macro_bleu: macro_average(&scores),
        failed: !failures.is_empty(),
        runs,
        failures,
    };
    if let Some(dir) = out_dir {
        crate::evaluator::write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}
