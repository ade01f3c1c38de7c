use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccvl_cli::{cmd_collect, cmd_coverage, cmd_eval, cmd_sweep, cmd_train, Format, RunOptions};

#[derive(Parser)]
#[command(name = "ccvl", version, about = "Confidence-conditioned value learning for tabular offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; files go to <out>/<experiment name>/
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed for this command
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent jobs
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            config: self.config.clone(),
            out: self.out.clone(),
            seed: self.seed,
            jobs: self.jobs,
            format: self.format,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset in the training environment
    Collect(Common),
    /// Train the configured method on a dataset
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Evaluate a trained model in the evaluation environment
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Monte Carlo coverage of the learned bounds over resampled datasets
    Coverage(Common),
    /// Sweep alpha for CQL and CCVL
    Sweep(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Collect(c) => cmd_collect(&c.options()),
        Command::Train { common, dataset } => cmd_train(&common.options(), dataset),
        Command::Eval { common, model } => cmd_eval(&common.options(), model),
        Command::Coverage(c) => cmd_coverage(&c.options()),
        Command::Sweep(c) => cmd_sweep(&c.options()),
    };
    match result {
        Ok(manifest) => {
            for out in &manifest.output_paths {
                println!("{}", out.path);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
