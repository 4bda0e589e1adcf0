use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod meta;

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "unikw", version, about = "Keyword retrieval from one encoder pass")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file overriding the subcommand's defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a vocabulary from a keyword list and training pairs.
    BuildVocab {
        #[arg(long)]
        keywords: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a forward or reversed keyword trie.
    BuildTrie {
        #[arg(long)]
        keywords: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum, default_value_t = TrieDirection::Fwd)]
        direction: TrieDirection,
        #[arg(long, default_value_t = unikw_core::corpus::DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder checkpoint.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        keywords: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed and index a catalog into a retrieval bundle directory.
    Index {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        keywords: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Graph)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cluster_threshold: Option<f64>,
    },
    /// Retrieve keywords for each line of a query file.
    Retrieve {
        #[arg(long)]
        bundle_dir: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        opts: RetrieveOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score retrieval results against labels and a quality scorer.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        propensities: Option<PathBuf>,
        #[arg(long, value_enum)]
        scorer: Option<ScorerName>,
        #[arg(long, value_enum, default_value_t = Match::Exact)]
        match_type: Match,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.7")]
        thresholds: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report encoder passes and latency per beam size.
    Bench {
        #[arg(long)]
        bundle_dir: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,50,100")]
        beams: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the keyword sets of two result files.
    Overlap {
        #[arg(long)]
        results_a: PathBuf,
        #[arg(long)]
        results_b: PathBuf,
        /// Only count labeled (good) keywords.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic keyword/query corpus.
    Synth {
        #[arg(long, default_value_t = 200)]
        keywords: usize,
        #[arg(long, default_value_t = 5)]
        queries_per_keyword: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct RetrieveOpts {
    #[arg(long)]
    pub beam: Option<usize>,
    /// Comma-separated subset of l2r,r2l.
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<String>>,
    /// Per-token log-probability floor.
    #[arg(long, allow_negative_numbers = true)]
    pub prune: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub search_list: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub nlg_floor: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub dr_floor: Option<f64>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum TrieDirection {
    Fwd,
    Rev,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Kind {
    Exact,
    Graph,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ScorerName {
    Overlap,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Match {
    Exact,
    Phrase,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::validation(e.to_string().trim_end());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.kind.exit_code() as u8);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.kind.exit_code() as u8)
        }
    }
}
