//! `lsgcn` command-line driver.
//!
//! Standard output line formats:
//!
//! ```text
//! train:      result dataset=<name> model=<kind> seeds=<k> mean_test_acc=<f> std_test_acc=<f>
//! eval:       split=<name> accuracy=<f> nodes=<n>
//! gradcheck:  gradcheck <case> max_rel_error=<e> PASS|FAIL
//!             gradcheck overall PASS|FAIL
//! inspect:    <field> <actual> [expected <n> PASS|FAIL [delta <d>]]
//! ```

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lsgcn::dataset::Split;

#[derive(Parser)]
#[command(name = "lsgcn", version, about = "Lookup-subnet spatial graph convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over a list of seeds and write histories, checkpoints and a summary.
    Train(TrainArgs),
    /// Report the accuracy of a checkpoint on dataset splits.
    Eval(EvalArgs),
    /// Run the built-in gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Print dataset statistics and compare them with expectations.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// First seed; the config's seed when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds to run.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "split", value_delimiter = ',', default_value = "test")]
    pub splits: Vec<Split>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = lsgcn::gradcheck::DEFAULT_EPS)]
    pub eps: f64,
    /// Corrupt the backward rule of one op (negative control).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// `cora`, `citeseer`, `pubmed` or a JSON file of expected counts.
    /// Defaults to the dataset's own name.
    #[arg(long)]
    pub expect: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
