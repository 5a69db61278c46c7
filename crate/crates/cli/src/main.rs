use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "pnfer", version, about = "Multi-modal expression recognition with positive/negative label prompts")]
struct Cli {
    /// Root that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Strip emotion leakage from corpus descriptions.
    RefineText {
        /// Corpus directory or a directory of `.txt` files.
        #[arg(long = "in")]
        input: PathBuf,
        /// JSON lexicon; the built-in one when omitted.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters and heads on the `train` split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainFlags,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// `pn_diff` or `pos_only`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption-pretrain on one corpus, classify another with unseen classes.
    Zeroshot {
        #[arg(long)]
        pretrain: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate the ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        /// Comma-separated cell ids to run instead of the whole grid.
        #[arg(long, value_delimiter = ',')]
        cells: Option<Vec<String>>,
        #[command(flatten)]
        overrides: TrainFlags,
    },
    /// Render an evaluation report or ablation CSV to markdown and SVG.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Modality letters, e.g. `vplf` or `vp`.
    #[arg(long)]
    pub modalities: Option<String>,
    /// `adaptive` or `fixed:<w_v>`.
    #[arg(long)]
    pub weighting: Option<String>,
    #[arg(long)]
    pub negation: Option<String>,
    /// Parallel-branch scale.
    #[arg(long)]
    pub s: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let ctx = commands::Context::new(cli.workdir, cli.config.as_deref())?;
    match cli.command {
        Command::GenData { seed, out } => commands::gen_data(&ctx, seed, &out),
        Command::RefineText { input, lexicon, out } => commands::refine_text(&ctx, &input, lexicon.as_deref(), &out),
        Command::Train { data, out, overrides } => commands::train(&ctx, &data, &out, &overrides),
        Command::Eval {
            checkpoint,
            data,
            split,
            mode,
            out,
        } => commands::eval(&ctx, &checkpoint, &data, split, mode, &out),
        Command::Zeroshot {
            pretrain,
            target,
            out,
            epochs,
            mode,
            seed,
        } => commands::zeroshot(&ctx, &pretrain, &target, &out, epochs, mode, seed),
        Command::Ablate {
            data,
            out,
            jobs,
            cells,
            overrides,
        } => commands::ablate(&ctx, &data, &out, jobs, cells, &overrides),
        Command::Report { input, out } => commands::report(&ctx, &input, &out),
    }
}
