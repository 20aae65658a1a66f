mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "neardup", version, about = "Batch near-duplicate image detection over binary embeddings")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "NEARDUP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Scorer selection shared by every stage that scores pairs.
#[derive(Args, Clone, Default)]
pub struct ScorerArgs {
    /// Pipeline configuration (JSON); every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Classifier model; overrides the configured one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Decision threshold; defaults to the model's stored threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted duplicates and ground truth.
    GenCorpus {
        /// Corpus spec (JSON); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many labeled training pairs to `pairs.csv`.
        #[arg(long)]
        pairs: Option<usize>,
        /// Label generation spec (JSON) used with --pairs.
        #[arg(long)]
        label_spec: Option<PathBuf>,
    },
    /// Build a compressed inverted index over LSH terms.
    BuildIndex {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Index only the heads listed in this cluster file.
        #[arg(long)]
        heads: Option<PathBuf>,
    },
    /// Top-K term-overlap search of queries against an index.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        min_overlap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pair classifier on labeled pairs.
    TrainClassifier {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score labeled or unlabeled pairs with a model.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify search hits, expanding cluster heads with augmentation members.
    Select {
        #[arg(long)]
        hits: PathBuf,
        /// Cluster file whose heads were indexed; without it every passing hit
        /// is kept as an edge.
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k_aug: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Write adversarial positives found through augmentation here.
        #[arg(long)]
        augmentation_labels: Option<PathBuf>,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Transitive closure, k-cut, and head election over verified matches.
    Cluster {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// The full static pipeline.
    Run {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "clusters.tsv")]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Merge a batch of new images into a cluster store.
    Incremental {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        new: PathBuf,
        /// Assignments TSV; defaults to `assignments-<batch>.tsv` in the store.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Run the pipeline on a corpus with ground truth and report metrics.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Hamming radius for candidate-generation recall.
        #[arg(long, default_value_t = 8)]
        distance: u32,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::GenCorpus { .. } => "gen-corpus",
            Command::BuildIndex { .. } => "build-index",
            Command::Search { .. } => "search",
            Command::TrainClassifier { .. } => "train-classifier",
            Command::Classify { .. } => "classify",
            Command::Select { .. } => "select",
            Command::Cluster { .. } => "cluster",
            Command::Run { .. } => "run",
            Command::Incremental { .. } => "incremental",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let stage = cli.command.stage();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {stage}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
