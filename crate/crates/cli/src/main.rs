mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "fusum", version, about = "Second-stage summary fusion: train, generate, fuse, evaluate, analyze")]
pub struct Cli {
    /// TOML configuration file; keys not given keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of every random component; overrides the file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-example parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output file or run directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        n: usize,
    },
    /// Corpus statistics as JSON.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Hold out validation and test sets, then halve the rest.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        test: usize,
    },
    /// Train a base model.
    TrainBase {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// base_A, base_B or base_full.
        #[arg(long, default_value = "base_full")]
        stage: String,
        /// Shared vocabulary; built from the training file when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Decode candidate summaries with a base model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// File name under candidates/; defaults to the data file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Pair examples with candidates produced by models that never saw them.
    BuildFusionset {
        /// Example files, paired in order with --cands.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long, required = true)]
        cands: Vec<PathBuf>,
    },
    /// Train the fusion model.
    TrainFusion {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Base checkpoint to start from; a fresh model when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Vocabulary, needed without --init.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// joint or generation.
        #[arg(long, default_value = "joint")]
        objective: String,
    },
    /// Fusion predictions and scores against the baselines.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// full, no_source, no_candidates or first_K.
        #[arg(long, default_value = "full")]
        ablation: String,
    },
    /// Analysis reports.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Few-shot protocol over several seeds.
    Fewshot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Finite-difference check of the fusion gradients.
    Gradcheck,
}

#[derive(Args, Debug)]
pub struct Scored {
    /// Fused records with references.
    #[arg(long)]
    pub data: PathBuf,
    /// predictions.jsonl written by evaluate.
    #[arg(long)]
    pub predictions: PathBuf,
}

#[derive(Args, Debug)]
pub struct Decoded {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Analyze {
    /// Ten equal bins per feature.
    Bins(Scored),
    /// Inference on the first k candidates.
    Prune {
        #[command(flatten)]
        input: Decoded,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Inference without the source or without the candidates.
    Ablate(Decoded),
    /// Novel n-grams against the source and the candidate pool.
    Abstractiveness(Scored),
    /// How often fusion beats the oracle of the first k candidates.
    OracleSurpass {
        #[command(flatten)]
        input: Scored,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SUMMAFUSION_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("error: {}", describe(&e));
            ExitCode::from(code)
        }
    }
}
