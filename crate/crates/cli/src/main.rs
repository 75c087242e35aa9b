use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "embforge",
    version,
    about = "Build training data for text embedding models and train a toy embedder on it"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SynthMode {
    Paraphrase,
    Augment,
    Hardneg,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LossArg {
    Retrieval,
    Cosent,
    Cls,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum UnitArg {
    Batches,
    Samples,
}

#[derive(Subcommand)]
pub enum Command {
    /// Turn raw records of one kind into samples (or scored pairs)
    Transform {
        /// title_body, claim_evidence, question_answer, sts_pair, entailment_triple, labeled_text
        #[arg(long)]
        kind: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1536)]
        max_chars: usize,
        /// negatives per classification sample
        #[arg(long, default_value_t = 4)]
        negs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        binarize_threshold: Option<f64>,
        /// extra dataset → instruction map layered over the built-in one
        #[arg(long)]
        instructions: Option<PathBuf>,
    },
    /// Paraphrase, augment or add generated hard negatives
    Synthesize {
        #[arg(long, value_enum)]
        mode: SynthMode,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// outputs requested per sample
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// answer offline with the deterministic stub
        #[arg(long, conflicts_with = "base_url")]
        stub: bool,
        #[arg(long, requires = "model")]
        base_url: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// environment variable holding the API key
        #[arg(long, default_value = "EMBFORGE_API_KEY")]
        api_key_env: String,
        #[arg(long, default_value_t = 4)]
        parallel: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// stub only: share of outputs that are deliberately invalid
        #[arg(long, default_value_t = 0.0)]
        fault_rate: f64,
        /// write every accepted generation here
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Add hard negatives from a ranked window of a document corpus
    Mine {
        #[arg(long = "in")]
        input: PathBuf,
        /// one document per line
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        rank_lo: usize,
        #[arg(long, default_value_t = 30)]
        rank_hi: usize,
        #[arg(long, default_value_t = 4)]
        negs: usize,
        /// score with a trained model instead of a freshly seeded one
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Drop repeated (query, positive) samples, keeping the first
    Dedup {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop retrieval samples whose query-positive score is below a threshold
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute a sampling plan from a dataset manifest
    Plan {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.72)]
        eta: f64,
        #[arg(long, value_enum, default_value = "batches")]
        ratio_unit: UnitArg,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy embedder through both stages
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// training config; missing keys take their defaults
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// held-out items for recall after each stage
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Evaluate a loss (and optionally check its gradient) on a JSON batch
    EvalLoss {
        #[arg(long, value_enum)]
        kind: LossArg,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        tau: f64,
        #[arg(long)]
        gradcheck: bool,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
    /// Run the staged pipeline described by a config file
    Run {
        #[arg(long)]
        config: PathBuf,
        /// force offline synthesis
        #[arg(long)]
        stub: bool,
        /// rerun stages even when up to date
        #[arg(long)]
        force: bool,
    },
    /// Write the bundled synthetic corpus and a pipeline config
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = embforge_core::fixtures::FIXTURE_SEED)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
