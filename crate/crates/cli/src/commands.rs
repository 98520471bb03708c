use std::path::{Path, PathBuf};

use serde_json::json;

use mmt_core::annotation::{create_session, current_labels, read_label_log, SessionStore};
use mmt_core::corpus::{load_monolingual, load_parallel_corpus, read_lines, ParallelCorpus, StopwordList, Vocabulary};
use mmt_core::evaluator::{noise_report as count_noise, run_ablation, sweep_image_count, write_json, AblationMode, NoiseReport};
use mmt_core::features::{assemble_bundles, import_features, mock_extract_manifest, FeatureStore};
use mmt_core::model::Model;
use mmt_core::query_builder::{build_heldout_queries, build_training_queries, read_queries, write_queries, QueryMode, TfidfModel};
use mmt_core::retrieval::{
    read_manifest, retrieve_for_corpus, write_manifest, HttpProvider, ImageCache, OfflineProvider, RetrieveOptions,
    SearchProvider,
};
use mmt_core::trainer::{score_split, train_multi_seed, Experiment, TrainConfig};

use crate::config::{parse_list, Config};
use crate::{CliError, RunOpts};

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime("io", format!("{}: {e}", path.display()))
}

pub fn build_queries(
    src: &Path,
    stopwords: Option<&Path>,
    fit: Option<&Path>,
    m: usize,
    mode: &str,
    out: &Path,
) -> Result<(), CliError> {
    let mode: QueryMode = mode.parse().map_err(|e: String| CliError::usage("args", e))?;
    if m == 0 {
        return Err(CliError::usage("args", "--m must be at least 1"));
    }
    let stops = match stopwords {
        Some(p) => StopwordList::load(p)?,
        None => StopwordList::english(),
    };
    let sources = load_monolingual(src)?;
    let sets = match fit {
        Some(fit_path) => {
            let fit_sources = load_monolingual(fit_path)?;
            let model = TfidfModel::fit(fit_sources.iter().map(Vec::as_slice), &stops)?;
            build_heldout_queries(&model, &sources, &stops, m, mode)?
        }
        None => {
            let model = TfidfModel::fit(sources.iter().map(Vec::as_slice), &stops)?;
            build_training_queries(&model, &sources, m, mode)?
        }
    };
    write_queries(out, &sets)?;
    let fallback = sets.iter().filter(|s| s.fallback).count();
    log::info!("wrote {} query sets ({fallback} fallback) to {}", sets.len(), out.display());
    emit(json!({ "sentences": sets.len(), "fallback": fallback, "out": out }));
    Ok(())
}

pub struct RetrieveArgs {
    pub queries: PathBuf,
    pub provider: String,
    pub endpoint: Option<String>,
    pub headers: Vec<String>,
    pub cache: PathBuf,
    pub per_sentence: usize,
    pub rate: f64,
    pub max_failures: usize,
    pub workers: usize,
    pub corpus_id: Option<String>,
    pub out: PathBuf,
}

pub fn retrieve(a: RetrieveArgs) -> Result<(), CliError> {
    let sets = read_queries(&a.queries)?;
    let offline;
    let live;
    let provider: &dyn SearchProvider = match a.provider.as_str() {
        "offline" => {
            offline = OfflineProvider::with_shipped_pool();
            &offline
        }
        "live" => {
            let endpoint = a
                .endpoint
                .ok_or_else(|| CliError::usage("args", "--provider live needs --endpoint"))?;
            let mut p = HttpProvider::new(endpoint);
            for h in &a.headers {
                let (name, value) = h
                    .split_once(':')
                    .ok_or_else(|| CliError::usage("args", format!("header {h:?} is not `Name: value`")))?;
                p = p.with_header(name.trim(), value.trim());
            }
            live = p;
            &live
        }
        other => return Err(CliError::usage("args", format!("unknown provider {other:?} (expected offline|live)"))),
    };
    if a.per_sentence == 0 || a.workers == 0 {
        return Err(CliError::usage("args", "--per-sentence and --workers must be at least 1"));
    }
    let opts = RetrieveOptions {
        per_sentence: a.per_sentence,
        max_failures: a.max_failures.max(1),
        rate: (a.rate > 0.0).then_some(a.rate),
        workers: a.workers,
        ..RetrieveOptions::default()
    };
    let corpus_id = a.corpus_id.unwrap_or_else(|| {
        a.queries
            .file_stem()
            .map_or_else(|| "corpus".to_owned(), |s| s.to_string_lossy().into_owned())
    });
    let cache = ImageCache::open(&a.cache)?;
    log::info!(
        "retrieving {} x {} images with provider {} (cache {})",
        sets.len(),
        opts.per_sentence,
        provider.name(),
        a.cache.display()
    );
    let (manifest, stats) = retrieve_for_corpus(provider, &sets, &cache, &corpus_id, &opts)?;
    write_manifest(&a.out, &manifest)?;
    emit(json!({
        "records": manifest.records.len(),
        "ok": stats.ok,
        "failed": stats.failed,
        "skipped": stats.skipped,
        "fetched": stats.fetched,
        "cache_hits": stats.cache_hits,
        "out": a.out,
    }));
    Ok(())
}

pub fn mock_extract(manifests: &[PathBuf], out: &Path, rows: usize, cols: usize) -> Result<(), CliError> {
    if rows == 0 || cols == 0 {
        return Err(CliError::usage("args", "--rows and --cols must be at least 1"));
    }
    let mut records = Vec::new();
    for m in manifests {
        records.extend(read_manifest(m)?);
    }
    let entries = mock_extract_manifest(&records, out, rows, cols)?;
    emit(json!({ "features": entries.len(), "rows": rows, "cols": cols, "out": out }));
    Ok(())
}

pub fn import(src: &Path, out: &Path) -> Result<(), CliError> {
    let entries = import_features(src, out)?;
    emit(json!({ "features": entries.len(), "out": out }));
    Ok(())
}

fn resolve(run: &RunOpts, command: &str) -> Result<Config, CliError> {
    let mut cfg = Config::load(run.config.as_deref())?;
    cfg.apply_overrides(&run.overrides)?;
    if let Some(seeds) = &run.seeds {
        cfg.set("seeds", seeds)?;
    }
    if let Some(out) = &run.out {
        cfg.set("out_dir", &out.to_string_lossy())?;
    }
    cfg.log_resolved(command);
    Ok(cfg)
}

fn out_dir(cfg: &Config) -> Result<PathBuf, CliError> {
    let out = cfg.path("out_dir")?;
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    std::fs::write(out.join("config.txt"), cfg.to_text()).map_err(io_err(&out))?;
    Ok(out)
}

fn feature_dims(cfg: &Config, store: &FeatureStore) -> Result<(usize, usize), CliError> {
    let inferred = store.entries().next().map(|e| (e.rows, e.cols));
    let pick = |key: &str, fallback: Option<usize>| -> Result<usize, CliError> {
        match cfg.raw(key) {
            "auto" => fallback.ok_or_else(|| CliError::runtime("features", format!("{key} = auto but the feature store is empty"))),
            _ => cfg.get(key),
        }
    };
    Ok((pick("feat_rows", inferred.map(|d| d.0))?, pick("feat_cols", inferred.map(|d| d.1))?))
}

fn load_split(cfg: &Config, name: &str) -> Result<ParallelCorpus, CliError> {
    Ok(load_parallel_corpus(cfg.path(&format!("{name}_src"))?, cfg.path(&format!("{name}_tgt"))?)?)
}

/// Corpora, manifests and features named by the configuration, with every
/// bundle holding `m` images.
fn load_experiment(cfg: &Config, m: usize) -> Result<Experiment, CliError> {
    let store = FeatureStore::load(cfg.path("features_dir")?)?;
    let dims = feature_dims(cfg, &store)?;
    let mut corpora = Vec::new();
    let mut bundles = Vec::new();
    for name in ["train", "dev", "test"] {
        let corpus = load_split(cfg, name)?;
        let records = read_manifest(&cfg.path(&format!("{name}_manifest"))?)?;
        let b = assemble_bundles(&records, &store, m, dims)?;
        if b.len() != corpus.len() || b.iter().enumerate().any(|(i, b)| b.sid != i) {
            return Err(CliError::runtime(
                "data",
                format!("{name}: manifest covers {} sentences, corpus has {}", b.len(), corpus.len()),
            ));
        }
        corpora.push(corpus);
        bundles.push(b);
    }
    let [b0, b1, b2]: [_; 3] = bundles.try_into().expect("three splits");
    Ok(Experiment::new([&corpora[0], &corpora[1], &corpora[2]], [b0, b1, b2], cfg.get("min_count")?))
}

fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<(), CliError> {
    std::fs::write(path, vocab.to_text()).map_err(io_err(path))
}

fn per_seed_json(per_seed: impl IntoIterator<Item = (u64, Option<f64>)>) -> serde_json::Value {
    per_seed
        .into_iter()
        .map(|(seed, bleu)| json!({ "seed": seed, "bleu": bleu }))
        .collect()
}

pub fn train(run: &RunOpts) -> Result<(), CliError> {
    let cfg = resolve(run, "train")?;
    let tc = cfg.train_config()?;
    let out = out_dir(&cfg)?;
    let exp = load_experiment(&cfg, tc.images_per_sentence)?;
    save_vocab(&exp.src_vocab, &out.join("src.vocab"))?;
    save_vocab(&exp.tgt_vocab, &out.join("tgt.vocab"))?;
    log::info!(
        "training {} seeds on {} pairs (vocab {}/{})",
        tc.seeds.len(),
        exp.train.len(),
        exp.src_vocab.len(),
        exp.tgt_vocab.len()
    );
    let report = train_multi_seed(&exp, &tc, Some(&out))?;
    emit(json!({
        "macro_bleu": report.macro_bleu,
        "per_seed": per_seed_json(report.runs.iter().map(|r| (r.seed, r.test_bleu()))),
        "failed": report.failed,
        "report": out.join("report.json"),
    }));
    if report.failed {
        let failures: Vec<String> = report.failures.iter().map(|f| format!("seed {}: {}", f.seed, f.error)).collect();
        return Err(CliError::runtime("train", failures.join("; ")));
    }
    Ok(())
}

pub fn evaluate(run: &RunOpts, run_dir: &Path, split_name: &str) -> Result<(), CliError> {
    let cfg = resolve(run, "evaluate")?;
    let tc = cfg.train_config()?;
    let exp = load_experiment(&cfg, tc.images_per_sentence)?;
    for (vocab, file) in [(&exp.src_vocab, "src.vocab"), (&exp.tgt_vocab, "tgt.vocab")] {
        let path = run_dir.join(file);
        let saved = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        if Vocabulary::from_text(&saved) != *vocab {
            return Err(CliError::runtime(
                "data",
                format!("{}: vocabulary differs from the configured training corpus", path.display()),
            ));
        }
    }
    let split = match split_name {
        "train" => &exp.train,
        "dev" => &exp.dev,
        "test" => &exp.test,
        other => return Err(CliError::usage("args", format!("unknown split {other:?} (expected train|dev|test)"))),
    };
    let out = match cfg.raw("out_dir") {
        "" => run_dir.to_path_buf(),
        _ => cfg.path("out_dir")?,
    };
    let hyp_dir = out.join(format!("eval_{split_name}"));
    std::fs::create_dir_all(&hyp_dir).map_err(io_err(&hyp_dir))?;
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    for &seed in &tc.seeds {
        let dir = run_dir.join(format!("seed_{seed}"));
        let model = Model::load(&dir.join("best.ckpt"), &dir.join("hparams.txt"))?;
        let (report, hyps) = score_split(&model, split, &exp.tgt_vocab, tc.images_per_sentence, tc.max_decode_len)?;
        let text: String = hyps.iter().map(|h| h.join(" ") + "\n").collect();
        let hyp_path = hyp_dir.join(format!("seed_{seed}.txt"));
        std::fs::write(&hyp_path, text).map_err(io_err(&hyp_path))?;
        log::info!("seed {seed}: {split_name} BLEU {:.2}", report.bleu);
        scores.push(report.bleu);
        rows.push(json!({ "seed": seed, "bleu": report.bleu, "report": report }));
    }
    let macro_bleu = mmt_core::trainer::macro_average(&scores);
    let summary = json!({ "split": split_name, "macro_bleu": macro_bleu, "per_seed": rows });
    write_json(&out.join(format!("eval_{split_name}.json")), &summary)?;
    emit(json!({
        "split": split_name,
        "macro_bleu": macro_bleu,
        "per_seed": per_seed_json(tc.seeds.iter().copied().zip(scores.iter().map(|&s| Some(s)))),
    }));
    Ok(())
}

pub fn ablate(run: &RunOpts, modes: &str) -> Result<(), CliError> {
    let modes: Vec<AblationMode> = modes
        .split(',')
        .map(|m| m.trim().parse().map_err(|e: String| CliError::usage("args", e)))
        .collect::<Result<_, _>>()?;
    let cfg = resolve(run, "ablate")?;
    let tc = cfg.train_config()?;
    let out = out_dir(&cfg)?;
    let exp = load_experiment(&cfg, tc.images_per_sentence)?;
    let rows = run_ablation(&exp, &modes, cfg.get("shuffle_seed")?, &tc, Some(&out))?;
    write_json(&out.join("ablation.json"), &rows)?;
    emit(json!({
        "rows": rows.iter().map(|r| json!({ "mode": r.mode, "macro_bleu": r.macro_bleu, "failed": r.failed })).collect::<Vec<_>>(),
        "out": out.join("ablation.json"),
    }));
    Ok(())
}

pub fn sweep(run: &RunOpts, m: &str) -> Result<(), CliError> {
    let m_values: Vec<usize> = parse_list(m)
        .map_err(|e| CliError::usage("args", format!("--m: {e}")))?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    if m_values.contains(&0) {
        return Err(CliError::usage("args", "--m values must be at least 1"));
    }
    let cfg = resolve(run, "sweep")?;
    let tc: TrainConfig = cfg.train_config()?;
    let out = out_dir(&cfg)?;
    let max_m = m_values.iter().copied().max().expect("non-empty list");
    let exp = load_experiment(&cfg, max_m)?;
    let rows = sweep_image_count(&exp, &m_values, &tc, Some(&out))?;
    write_json(&out.join("sweep.json"), &rows)?;
    emit(json!({
        "rows": rows.iter().map(|r| json!({ "m": r.m, "macro_bleu": r.macro_bleu, "failed": r.failed })).collect::<Vec<_>>(),
        "out": out.join("sweep.json"),
    }));
    Ok(())
}

pub struct ServeArgs {
    pub manifest: PathBuf,
    pub sample: usize,
    pub seed: u64,
    pub host: String,
    pub port: u16,
    pub session_dir: PathBuf,
    pub queries: Option<PathBuf>,
    pub src: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

pub fn annotate_serve(a: ServeArgs) -> Result<(), CliError> {
    let records = read_manifest(&a.manifest)?;
    let session = create_session(&records, a.sample, a.seed)?;
    let id = session.id.clone();
    let store = SessionStore::open(&a.session_dir.join(&id), session)?;
    let sources = match &a.src {
        Some(p) => read_lines(p)?,
        None => Vec::new(),
    };
    let mut state = mmt_annotate::AppState::new(vec![store], sources.clone());
    if let Some(q) = &a.queries {
        state = state.with_inspect(mmt_annotate::InspectData::load(q, &records, sources).map_err(io_err(q))?);
    }
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::usage("args", format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let app = mmt_annotate::router(state, a.static_dir);
    emit(json!({ "session": id, "url": format!("http://{addr}/session/{id}/next") }));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(mmt_annotate::serve(addr, app))?;
    Ok(())
}

pub fn noise_report(labels: Option<&Path>, counts: Option<(usize, usize)>) -> Result<(), CliError> {
    let report: NoiseReport = match (labels, counts) {
        (Some(path), _) => {
            let current = current_labels(&read_label_log(path)?);
            count_noise(current.into_values())?
        }
        (None, Some((noise, total))) => NoiseReport::from_counts(noise, total)?,
        (None, None) => return Err(CliError::usage("args", "give --labels or --noise with --total")),
    };
    emit(serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}
