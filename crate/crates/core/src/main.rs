use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use camodiff::config::Config;
use camodiff::detect::ArchVariant;
use camodiff::pipeline::{Stage, Workspace};
use camodiff::synthcorpus::Split;
use camodiff::{workflow, Result};

#[derive(Parser)]
#[command(
    name = "camodiff",
    version,
    about = "Two-stage latent camouflage against toy vehicle detectors"
)]
struct Cli {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training and, for gen-data, the corpus.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workspace directory holding every artifact.
    #[arg(long, global = true, default_value = "camodiff-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    White,
    Black,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the latent autoencoder, then the conditional denoiser prior.
    TrainAe {
        /// Train only the autoencoder.
        #[arg(long)]
        skip_prior: bool,
    },
    /// Train the latent scene classifier behind the perceptual losses.
    TrainCritic,
    /// Train the white-box and/or black-box detector.
    TrainDetector {
        #[arg(long, value_enum, default_value = "both")]
        which: Which,
    },
    /// No-Box stage.
    TrainStage1,
    /// White-Box stage, continuing from the latest stage-1 checkpoint.
    TrainStage2,
    /// One-stage ablation.
    TrainOnestage,
    /// Write camouflaged and composited samples as PNG files.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Attack evaluation against both detectors, plus configured defenses.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "main")]
        name: String,
    },
    /// Defended evaluation of the white-box detector.
    EvalDefense {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "defense")]
        name: String,
    },
    /// Cross-background transfer of a scene-level checkpoint.
    EvalTransfer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "transfer")]
        name: String,
    },
    /// Print every evaluation table in the workspace.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let ws = Workspace::new(&cli.out);
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenData => {
            if let Some(s) = cli.seed {
                cfg.corpus.seed = s;
            }
            let c = workflow::gen_data(&cfg, &ws)?;
            println!(
                "corpus: {} train, {} val, {} test -> {}",
                c.train.len(),
                c.val.len(),
                c.test.len(),
                ws.corpus().display()
            );
        }
        Command::TrainAe { skip_prior } => {
            print(&workflow::train_ae(&cfg, &ws, seed)?)?;
            if !skip_prior && cfg.backend.prior_iterations > 0 {
                print(&workflow::train_prior(&cfg, &ws, seed)?)?;
            }
        }
        Command::TrainCritic => print(&workflow::train_critic(&cfg, &ws, seed)?)?,
        Command::TrainDetector { which } => {
            let v: Vec<ArchVariant> = match which {
                Which::White => vec![cfg.detector.white_box],
                Which::Black => vec![cfg.detector.black_box],
                Which::Both => vec![cfg.detector.white_box, cfg.detector.black_box],
            };
            print(&workflow::train_detectors(&cfg, &ws, seed, &v)?)?
        }
        Command::TrainStage1 => print(&workflow::train(&cfg, &ws, Stage::NoBox, seed)?)?,
        Command::TrainStage2 => print(&workflow::train(&cfg, &ws, Stage::WhiteBox, seed)?)?,
        Command::TrainOnestage => print(&workflow::train(&cfg, &ws, Stage::OneStage, seed)?)?,
        Command::Sample {
            checkpoint,
            split,
            count,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let dir = ws.root.join("samples");
            for p in workflow::sample(&cfg, &ws, checkpoint.as_deref(), split, count, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { checkpoint, name } => {
            print!("{}", workflow::eval(&cfg, &ws, checkpoint.as_deref(), &name)?.table())
        }
        Command::EvalDefense { checkpoint, name } => {
            print!(
                "{}",
                workflow::eval_defense(&cfg, &ws, checkpoint.as_deref(), &name)?.table()
            )
        }
        Command::EvalTransfer { checkpoint, name } => {
            print!(
                "{}",
                workflow::eval_transfer(&cfg, &ws, checkpoint.as_deref(), &name)?.table()
            )
        }
        Command::Report => print!("{}", workflow::report(&ws)?),
    }
    Ok(())
}

fn print<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
