//! `mmt`: one binary driving query building, retrieval, features,
//! training, evaluation and the annotation service.
//!
//! Exit status: 0 success, 1 runtime error, 2 usage or configuration
//! error. Failures print one line `mmt: error[<category>]: <message>`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
    pub usage: bool,
}

impl CliError {
    pub fn runtime(category: &'static str, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
            usage: false,
        }
    }

    pub fn usage(category: &'static str, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
            usage: true,
        }
    }
}

macro_rules! error_category {
    ($($ty:path => $cat:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::runtime($cat, e.to_string())
            }
        })*
    };
}

error_category! {
    mmt_core::corpus::CorpusError => "corpus",
    mmt_core::query_builder::QueryError => "query",
    mmt_core::retrieval::RetrievalError => "retrieval",
    mmt_core::features::FeatureError => "features",
    mmt_core::model::ModelError => "model",
    mmt_core::trainer::TrainError => "train",
    mmt_core::evaluator::EvalError => "eval",
    mmt_core::annotation::AnnotationError => "annotation",
    std::io::Error => "io",
}

#[derive(Parser, Debug)]
#[command(name = "mmt", version, about = "Retrieval-augmented multimodal translation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the commands that load a full experiment.
#[derive(Args, Debug, Clone)]
pub struct RunOpts {
    /// `key = value` configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set lr=0.01`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated seeds (overrides `seeds`)
    #[arg(long)]
    pub seeds: Option<String>,
    /// Output directory (overrides `out_dir`)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank TF-IDF terms and write the search queries for each source sentence
    BuildQueries {
        /// Source-side sentences, one per line
        #[arg(long)]
        src: PathBuf,
        /// Stopword list, one word per line (default: the bundled English list)
        #[arg(long)]
        stopwords: Option<PathBuf>,
        /// Fit TF-IDF statistics on this file instead of `--src` (for dev/test splits)
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Queries per sentence
        #[arg(long, default_value_t = 5)]
        m: usize,
        /// `concat` joins the top-j terms; `single` uses the j-th term alone
        #[arg(long, default_value = "concat")]
        query_mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fetch the first available image for every query
    Retrieve {
        #[arg(long)]
        queries: PathBuf,
        /// `offline` uses the bundled fixture pool; `live` queries `--endpoint`
        #[arg(long, default_value = "offline")]
        provider: String,
        /// Search endpoint for the live provider, with `{query}` and `{offset}` placeholders
        #[arg(long)]
        endpoint: Option<String>,
        /// Extra request header for the live provider, `Name: value` (repeatable)
        #[arg(long = "header")]
        headers: Vec<String>,
        /// Image cache directory
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, default_value_t = 5)]
        per_sentence: usize,
        /// Requests per second for live providers
        #[arg(long, default_value_t = 2.0)]
        rate: f64,
        /// Candidate failures tolerated per slot
        #[arg(long, default_value_t = 5)]
        max_failures: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Corpus identifier stored in the manifest metadata
        #[arg(long)]
        corpus_id: Option<String>,
        /// Output manifest
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce or ingest region-feature files
    Features {
        #[command(subcommand)]
        action: FeaturesCommand,
    },
    /// Train one model per seed and report macro-averaged test BLEU
    Train(RunOpts),
    /// Score trained checkpoints on a split
    Evaluate {
        #[command(flatten)]
        run: RunOpts,
        /// Training output directory holding `seed_<s>/best.ckpt` and vocabularies
        #[arg(long)]
        run_dir: PathBuf,
        /// train, dev or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Retrain with retrieved, shuffled or blank images
    Ablate {
        #[command(flatten)]
        run: RunOpts,
        /// Comma-separated modes: retrieved, shuffled, blank
        #[arg(long, default_value = "retrieved,shuffled,blank")]
        mode: String,
    },
    /// Retrain for each number of images per sentence
    Sweep {
        #[command(flatten)]
        run: RunOpts,
        /// Counts as a list or inclusive range, e.g. `1..8`
        #[arg(long, default_value = "1..8")]
        m: String,
    },
    /// Serve a sampled annotation session over HTTP
    AnnotateServe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1000)]
        sample: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory holding per-session state and labels
        #[arg(long, default_value = "annotation")]
        session_dir: PathBuf,
        /// queries.jsonl for the inspection views
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Source sentences shown beside each image
        #[arg(long)]
        src: Option<PathBuf>,
        /// Directory of the browser client
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Count noise labels and report the noise proportion
    NoiseReport {
        /// labels.jsonl written by the annotation service
        #[arg(long, required_unless_present = "noise", conflicts_with_all = ["noise", "total"])]
        labels: Option<PathBuf>,
        /// Noise count (with `--total`) instead of a label file
        #[arg(long, requires = "total")]
        noise: Option<usize>,
        #[arg(long, requires = "noise")]
        total: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum FeaturesCommand {
    /// Deterministic pseudo-random features keyed by image content hash
    MockExtract {
        /// Retrieval manifest (repeatable)
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = mmt_core::features::DEFAULT_ROWS)]
        rows: usize,
        #[arg(long, default_value_t = mmt_core::features::DEFAULT_COLS)]
        cols: usize,
    },
    /// Validate and copy externally extracted FEAT files
    Import {
        /// Directory with `features.jsonl` and FEAT files
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::BuildQueries {
            src,
            stopwords,
            fit,
            m,
            query_mode,
            out,
        } => c::build_queries(&src, stopwords.as_deref(), fit.as_deref(), m, &query_mode, &out),
        Command::Retrieve {
            queries,
            provider,
            endpoint,
            headers,
            cache,
            per_sentence,
            rate,
            max_failures,
            workers,
            corpus_id,
            out,
        } => c::retrieve(c::RetrieveArgs {
            queries,
            provider,
            endpoint,
            headers,
            cache,
            per_sentence,
            rate,
            max_failures,
            workers,
            corpus_id,
            out,
        }),
        Command::Features { action } => match action {
            FeaturesCommand::MockExtract { manifests, out, rows, cols } => c::mock_extract(&manifests, &out, rows, cols),
            FeaturesCommand::Import { src, out } => c::import(&src, &out),
        },
        Command::Train(run) => c::train(&run),
        Command::Evaluate { run, run_dir, split } => c::evaluate(&run, &run_dir, &split),
        Command::Ablate { run, mode } => c::ablate(&run, &mode),
        Command::Sweep { run, m } => c::sweep(&run, &m),
        Command::AnnotateServe {
            manifest,
            sample,
            seed,
            host,
            port,
            session_dir,
            queries,
            src,
            static_dir,
        } => c::annotate_serve(c::ServeArgs {
            manifest,
            sample,
            seed,
            host,
            port,
            session_dir,
            queries,
            src,
            static_dir,
        }),
        Command::NoiseReport { labels, noise, total } => c::noise_report(labels.as_deref(), noise.zip(total)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code.clamp(0, 255) as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmt: error[{}]: {}", e.category, e.message.replace('\n', " "));
            ExitCode::from(if e.usage { 2 } else { 1 })
        }
    }
}
