//! `gramlm`: lexicon extraction, masking plans, training and inspection.

mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gramlm", version, about = "Explicit n-gram masked language modeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct CorpusArgs {
    /// UTF-8 text files.
    #[arg(long = "corpus", required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Keep case (words are lowercased by default).
    #[arg(long)]
    pub no_lowercase: bool,
    /// Documents are separated by blank lines instead of one per line.
    #[arg(long)]
    pub paragraphs: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Count word n-grams and keep the top-k per order by T-test score.
    ExtractLexicon {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Bigrams to keep.
        #[arg(long, default_value_t = 2000)]
        k2: usize,
        /// Trigrams to keep.
        #[arg(long, default_value_t = 1000)]
        k3: usize,
        /// Extra orders as ORDER=K, e.g. `--k 4=500`.
        #[arg(long = "k", value_parser = commands::parse_order_k)]
        extra: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 5)]
        min_count: u64,
        /// Documents per counting shard.
        #[arg(long, default_value_t = 10_000)]
        shard_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output TSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a whole-word fine-grained vocabulary.
    BuildVocab {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        #[arg(long, default_value_t = 30_000)]
        max_size: usize,
        /// Number of indexed query symbols [M1]..[Mk].
        #[arg(long, default_value_t = 8)]
        max_query: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split sentences into n-gram segments (` | ` between segments).
    Segment {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample masks and write a binary plan file.
    MakeMasks {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// contiguous, explicit, comprehensive or relation.
        #[arg(long)]
        objective: gramlm::maskplan::Objective,
        /// Fraction of segments to mask.
        #[arg(long, default_value_t = 0.15)]
        rate: f64,
        /// Longest masked segment given query symbols (default: all the
        /// vocabulary provides).
        #[arg(long)]
        max_query: Option<usize>,
        /// Longest example in subwords; longer documents are split.
        #[arg(long, default_value_t = 128)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the plans as readable JSON.
        #[arg(long)]
        dump_json: Option<PathBuf>,
    },
    /// Train the model on a plan file.
    Train(TrainArgs),
    /// Geometric-mean n-gram perplexity of a checkpoint on held-out plans.
    EvalPpl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        plans: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep only the encoder over the fine vocabulary, for fine-tuning.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Head-mean attention of the last layer on a text, as CSV.
    InspectAttention {
        /// Full or exported checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        /// Read the text from a file.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        no_lowercase: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub plans: PathBuf,
    /// TOML training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Weight λ of the replaced-token term.
    #[arg(long)]
    pub rtd_weight: Option<f64>,
    /// Probability that a relation slot keeps [MASK] instead of a sample.
    #[arg(long)]
    pub keep_mask_prob: Option<f64>,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Single thread and `wall_ms = 0`: logs are byte-reproducible.
    #[arg(long)]
    pub deterministic: bool,
    /// Continue from a trainer checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Directory for periodic and diagnostic checkpoints.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Final checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines metrics log.
    #[arg(long)]
    pub log: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ExtractLexicon {
            corpus,
            k2,
            k3,
            extra,
            min_count,
            shard_size,
            seed,
            out,
        } => commands::extract_lexicon(&corpus, k2, k3, &extra, min_count, shard_size, seed, &out),
        Command::BuildVocab {
            corpus,
            min_count,
            max_size,
            max_query,
            seed,
            out,
        } => commands::build_vocab(&corpus, min_count, max_size, max_query, seed, &out),
        Command::Segment {
            corpus,
            lexicon,
            seed,
            out,
        } => commands::segment(&corpus, &lexicon, seed, &out),
        Command::MakeMasks {
            corpus,
            lexicon,
            vocab,
            objective,
            rate,
            max_query,
            max_len,
            seed,
            out,
            dump_json,
        } => commands::make_masks(commands::MaskArgs {
            corpus: &corpus,
            lexicon: &lexicon,
            vocab: &vocab,
            objective,
            rate,
            max_query,
            max_len,
            seed,
            out: &out,
            dump_json: dump_json.as_deref(),
        }),
        Command::Train(args) => commands::train(&args),
        Command::EvalPpl {
            checkpoint,
            plans,
            seed,
            out,
        } => commands::eval_ppl(&checkpoint, &plans, seed, out.as_deref()),
        Command::Export { checkpoint, seed, out } => commands::export(&checkpoint, seed, &out),
        Command::InspectAttention {
            checkpoint,
            vocab,
            text,
            input,
            no_lowercase,
            seed,
            out,
        } => commands::inspect_attention(&checkpoint, &vocab, text, input.as_deref(), !no_lowercase, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gramlm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
