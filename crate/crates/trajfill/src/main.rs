use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use trajfill::config::{RunConfig, SplitName};
use trajfill::runner::{self, Predictor};

/// Hidden-visit reconstruction pipeline: synthesize sparse mobility data,
/// train the masked-sequence model, score it against baselines, and fill the
/// gaps of real days.
#[derive(Parser)]
#[command(name = "trajfill", version)]
struct Cli {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override; wins over the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Thread count never changes numeric results.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Output directory; every artifact lands under it.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Transformer,
    Markov,
    Knn,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: observed dataset, ground truth, answer key.
    Synth,
    /// Train on a data directory (expects dataset.jsonl).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from the saved last checkpoint in the out directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a predictor's hidden-visit predictions against the answer key.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "answer-key")]
        answer_key: PathBuf,
        #[arg(long, value_enum, default_value_t = PredictorArg::Transformer)]
        predictor: PredictorArg,
        /// Trained checkpoint (transformer predictor).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// External ranked-prediction file (file predictor).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// User split to score; defaults to the config's eval.split.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Retrain with context features nulled and tabulate accuracy deltas.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "answer-key")]
        answer_key: PathBuf,
    },
    /// Fill queried times of sparse days with model predictions.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file to complete.
        #[arg(long)]
        data: PathBuf,
        /// JSON-lines query file: {user, date, time_or_slot}.
        #[arg(long)]
        queries: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck,
}

fn load_config(cli: &Cli) -> trajfill::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.world.seed = None;
        cfg.sparsify.seed = None;
        cfg.training.seed = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> trajfill::Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    runner::with_threads(cli.threads, move || match &cli.command {
        Command::Synth => runner::cmd_synth(&cfg, &out),
        Command::Train { data, resume } => runner::cmd_train(&cfg, data, &out, *resume),
        Command::Eval { data, answer_key, predictor, checkpoint, predictions, split } => {
            let predictor = match predictor {
                PredictorArg::Transformer => Predictor::Transformer,
                PredictorArg::Markov => Predictor::Markov,
                PredictorArg::Knn => Predictor::Knn,
                PredictorArg::File => Predictor::File,
            };
            let split = split.map(|s| match s {
                SplitArg::Train => SplitName::Train,
                SplitArg::Val => SplitName::Val,
                SplitArg::Test => SplitName::Test,
                SplitArg::All => SplitName::All,
            });
            runner::cmd_eval(
                &cfg,
                data,
                answer_key,
                &out,
                predictor,
                checkpoint.as_deref(),
                predictions.as_deref(),
                split,
            )
        }
        Command::Ablate { data, answer_key } => runner::cmd_ablate(&cfg, data, answer_key, &out),
        Command::Reconstruct { checkpoint, data, queries } => {
            runner::cmd_reconstruct(&cfg, checkpoint, data, queries, &out)
        }
        Command::Gradcheck => runner::cmd_gradcheck(Some(&out)),
    })?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
