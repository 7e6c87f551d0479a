//! Library side of the `iiloss` command: configuration, subcommands and
//! argument handling.

pub mod commands;
pub mod config;

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use iiloss::data::SplitMode;
use iiloss::training::TrainRegime;

use commands::{CliError, CliResult};
use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "iiloss", version, about = "Open set recognition with ii-loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the open-set split and write split.json.
    Split(RunArgs),
    /// Split, train and write model.iim and curves.csv.
    Train(RunArgs),
    /// Evaluate a trained model on the run's test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Model file; defaults to model.iim in the run directory.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Label feature rows read as CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV of feature rows in the model's input space; `-` reads stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        /// Write predictions here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// The first input line is a header.
        #[arg(long)]
        header: bool,
    },
    /// Welch t-test per metric between two groups of runs.
    Compare {
        /// Reports (or run directories) of the first group.
        #[arg(long = "a", num_args = 1.., required = true)]
        a: Vec<PathBuf>,
        /// Reports (or run directories) of the second group.
        #[arg(long = "b", num_args = 1.., required = true)]
        b: Vec<PathBuf>,
        /// Write the comparison as CSV here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub known: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SplitMode>,
    #[arg(long, value_parser = parse_regime)]
    pub regime: Option<TrainRegime>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub contamination_ratio: Option<f64>,
}

fn parse_mode(s: &str) -> Result<SplitMode, String> {
    match s {
        "resplit" => Ok(SplitMode::Resplit),
        "fixed-test" => Ok(SplitMode::FixedTest),
        _ => Err(format!("unknown mode {s:?} (resplit, fixed-test)")),
    }
}

fn parse_regime(s: &str) -> Result<TrainRegime, String> {
    match s {
        "ii" => Ok(TrainRegime::Ii),
        "ce" => Ok(TrainRegime::Ce),
        "ii_ce" | "ii+ce" => Ok(TrainRegime::IiCe),
        _ => Err(format!("unknown regime {s:?} (ii, ce, ii_ce)")),
    }
}

impl RunArgs {
    /// Loads the config file and applies command-line overrides.
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.known {
            c.split.known = Some(v);
            c.split.known_ids = None;
        }
        if let Some(v) = self.split_seed {
            c.split.seed = Some(v);
        }
        if let Some(v) = self.mode {
            c.split.mode = Some(v);
        }
        if let Some(v) = self.regime {
            c.train.regime = v;
        }
        if let Some(v) = self.iterations {
            c.train.iterations = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            c.train.learning_rate = v;
        }
        if let Some(v) = self.contamination_ratio {
            c.train.contamination_ratio = v;
        }
        Ok(c)
    }
}

fn create(path: &PathBuf) -> CliResult<File> {
    File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Executes one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Split(args) => commands::split(&args.resolve()?, out),
        Command::Train(args) => commands::train_run(&args.resolve()?, out),
        Command::Eval { run, model } => commands::eval_run(&run.resolve()?, model.as_deref(), out).map(drop),
        Command::Predict {
            model,
            input,
            output,
            header,
        } => {
            let mut reader: Box<dyn io::BufRead> = if input.as_os_str() == "-" {
                commands::stdin_reader()
            } else {
                let file = File::open(&input).map_err(|e| CliError::Runtime(format!("{}: {e}", input.display())))?;
                Box::new(BufReader::new(file))
            };
            let mut stderr = io::stderr();
            let summary = match &output {
                Some(path) => commands::predict(&model, &mut reader, header, &mut create(path)?, &mut stderr)?,
                None => commands::predict(&model, &mut reader, header, out, &mut stderr)?,
            };
            if !summary.malformed.is_empty() {
                eprintln!(
                    "{} rows predicted, {} malformed rows skipped",
                    summary.predicted,
                    summary.malformed.len()
                );
            }
            Ok(())
        }
        Command::Compare { a, b, output } => {
            let rows = commands::compare(&a, &b)?;
            if let Some(path) = output {
                create(&path)?
                    .write_all(commands::comparison_csv(&rows).as_bytes())
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            }
            write!(out, "{}", commands::comparison_table(&rows)).map_err(|e| CliError::Runtime(e.to_string()))
        }
    }
}
