//! phonlu command line.
//!
//! Subcommands cover the full pipeline: vocabulary inspection, encoder
//! pretraining, classifier training and evaluation, learning curves, grid
//! search, the LUSID splice workflow, recognizer-adapter transcription, and
//! attention plots. Every run writes a `manifest.json` into its `--out`
//! directory so results are reproducible from the recorded command, config,
//! and seed.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error, 3 training
//! divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "phonlu", version, about = "Word-free spoken language understanding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Configuration precedence is CLI flag,
/// then config-file key, then built-in default.
#[derive(Args)]
struct CommonArgs {
    /// Output directory; receives manifest.json and all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without a validation-accuracy improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    CnnLstm,
    Transformer,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Top1,
    Topk,
}

#[derive(Subcommand)]
enum Command {
    /// Build a phone vocabulary from a JSONL dataset.
    Vocab {
        #[arg(long)]
        data: PathBuf,
        /// Drop phones seen fewer than this many times.
        #[arg(long)]
        min_count: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pretrain a transformer encoder with masked phone prediction.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train an intent classifier on a seeded train/validation/test split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        /// Warm-start checkpoint; its encoder weights and vocabulary are
        /// adopted, the classifier head is fresh.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Run k-fold cross-validation instead of a single split.
        #[arg(long)]
        cv_folds: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a checkpoint on a labeled dataset; metrics JSON on stdout.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Accuracy as a function of training-set size.
    Curve {
        #[arg(long)]
        data: PathBuf,
        /// Training-subset size increment.
        #[arg(long)]
        step: usize,
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Exhaustive hyperparameter grid search.
    Grid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        /// key=v1,v2,... space file; defaults to the built-in transformer
        /// space when the family is transformer.
        #[arg(long)]
        space: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the two-class attention classifier used by the splice workflow.
    LusidTrain {
        #[arg(long)]
        class_a: PathBuf,
        #[arg(long)]
        class_b: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Attention-peak positions for every utterance in a dataset.
    LusidLocate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Excise around each attention peak and splice in a prototype.
    LusidSplice {
        #[arg(long)]
        model: PathBuf,
        /// Source utterances to splice over.
        #[arg(long)]
        base: PathBuf,
        /// Space-separated prototype phones.
        #[arg(long)]
        prototype: String,
        /// Intent label the prototype realizes.
        #[arg(long)]
        label: String,
        #[arg(long)]
        l: usize,
        #[arg(long)]
        r: usize,
        /// Score verification with this checkpoint instead of --model.
        #[arg(long)]
        verifier: Option<PathBuf>,
        /// Keep unverified examples in generated.jsonl too.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fraction of a generated dataset the classifier assigns to a label.
    LusidVerify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Target intent label.
        #[arg(long)]
        target: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Sweep excision windows and report verification accuracy per cell.
    LusidTune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        prototype: String,
        #[arg(long)]
        label: String,
        #[arg(long, default_value_t = 0)]
        l_min: usize,
        #[arg(long, default_value_t = 3)]
        l_max: usize,
        #[arg(long, default_value_t = 0)]
        r_min: usize,
        #[arg(long, default_value_t = 3)]
        r_max: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the external recognizer on one file or a manifest of files.
    #[command(group(ArgGroup::new("input").required(true).args(["audio", "manifest"])))]
    Transcribe {
        #[arg(long)]
        audio: Option<PathBuf>,
        /// CSV manifest with header path,id,intent,language,speaker.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Shell command with an {input} placeholder.
        #[arg(long)]
        command_template: Option<String>,
        #[arg(long, value_enum)]
        output_mode: Option<ModeArg>,
        #[arg(long)]
        k: Option<usize>,
        /// Raw-output cache directory. The PHONLU_CACHE_DIR environment
        /// variable overrides this.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Attention scores for one utterance as CSV plus an SVG bar chart.
    PlotAttention {
        #[arg(long)]
        model: PathBuf,
        /// Space-separated phone transcript.
        #[arg(long)]
        phones: String,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version surface as "errors" that print to stdout.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
