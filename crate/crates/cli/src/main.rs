use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tailgeo::commands::{self, Predictor};
use tailgeo::config::{RunConfig, Sweep};
use tailgeo::par;
use tailgeo::Error;

#[derive(Parser)]
#[command(
    name = "tailgeo",
    version,
    about = "Long-tailed point-cloud segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, overriding `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads, overriding `run.threads` (1 runs sequentially).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and validation scenes for every seed.
    Generate(Common),
    /// Write per-class statistics of the training scenes.
    Stats(Common),
    /// Train one classifier per seed.
    Train(Common),
    /// Score a model or a predictions file on a labelled scene.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(
            long,
            conflicts_with = "predictions",
            required_unless_present = "predictions"
        )]
        model: Option<PathBuf>,
        /// One class id per line, in scene order.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Sweep one loss hyperparameter over all seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `name=v1,v2,...` with name one of beta, r, k, alpha.
        #[arg(long)]
        sweep: String,
    },
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if cfg.threads > 1 {
        par::init_global_pool(cfg.threads);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Error> {
    match cli.command {
        Command::Generate(c) => commands::generate(&load(&c)?),
        Command::Stats(c) => commands::stats(&load(&c)?),
        Command::Train(c) => commands::train(&load(&c)?),
        Command::Evaluate {
            common,
            model,
            predictions,
            scene,
        } => {
            let cfg = load(&common)?;
            let predictor = match (model, predictions) {
                (Some(m), _) => Predictor::Model(m),
                (None, Some(p)) => Predictor::Predictions(p),
                (None, None) => return Err(Error::Usage("pass --model or --predictions".into())),
            };
            let eval = commands::evaluate(&cfg, &predictor, &scene)?;
            print!("{}", eval.report.to_csv());
            Ok(eval.written)
        }
        Command::Ablate { common, sweep } => {
            let sweep: Sweep = sweep.parse()?;
            commands::ablate(&load(&common)?, &sweep).map(|(_, written)| written)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(written) => {
            for p in written {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tailgeo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
