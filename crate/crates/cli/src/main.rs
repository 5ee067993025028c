use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use due_cli::commands::{self, Demo, EvalSource};
use due_cli::{CliError, Result};

/// Deterministic uncertainty estimation with deep kernel learning.
#[derive(Parser)]
#[command(name = "due", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config (or a run manifest).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output.dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-row predictions of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Evaluate on the data described by a run config.
        #[arg(long, conflicts_with_all = ["csv", "grid"])]
        config: Option<PathBuf>,
        /// Evaluate on a headed CSV file.
        #[arg(long, conflicts_with = "grid")]
        csv: Option<PathBuf>,
        /// Box `x0_lo,x0_hi,x1_lo,x1_hi` (the last two are ignored for 1-D inputs).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        grid: Option<Vec<f64>>,
        /// Grid points per axis.
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the models behind one of the figure demos and write plot data.
    Demo {
        name: Demo,
        #[arg(long, default_value = "demo-out")]
        out: PathBuf,
        /// Small-scale protocol for smoke runs.
        #[arg(long)]
        quick: bool,
    },
    /// Gradient, oracle and Lipschitz self-checks.
    Check {
        /// Corrupt the gradient rule of one op (negative control).
        #[arg(long)]
        inject_fault: Option<String>,
        /// Write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let man = commands::cmd_train(&config, out.as_deref())?;
            print_metrics(&man.metrics);
            if let Some(p) = man.outputs.get("model") {
                println!("model written to {}", p.display());
            }
        }
        Command::Eval {
            model,
            config,
            csv,
            grid,
            resolution,
            out,
        } => {
            let source = match (config, csv, grid) {
                (Some(c), _, _) => EvalSource::Config(c),
                (_, Some(c), _) => EvalSource::Csv(c),
                (_, _, Some(g)) => {
                    let bounds: [f64; 4] = g
                        .try_into()
                        .map_err(|_| CliError::Usage("--grid takes four comma-separated numbers".into()))?;
                    EvalSource::Grid { bounds, resolution }
                }
                _ => return Err(CliError::Usage("eval needs one of --config, --csv or --grid".into())),
            };
            let man = commands::cmd_eval(&model, &source, &out)?;
            print_metrics(&man.metrics);
            println!("predictions written to {}", out.display());
        }
        Command::Demo { name, out, quick } => {
            let man = commands::cmd_demo(name, &out, quick)?;
            print_metrics(&man.metrics);
            println!("outputs written to {}", out.display());
        }
        Command::Check { inject_fault, report } => {
            let fault = inject_fault.as_deref().map(commands::parse_op).transpose()?;
            let results = commands::cmd_check(fault, report.as_deref())?;
            println!("all {} checks passed", results.len());
        }
    }
    Ok(())
}

fn print_metrics(metrics: &std::collections::BTreeMap<String, f64>) {
    for (k, v) in metrics {
        println!("{k} = {v}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config { key: Some(k), .. } => eprintln!("error: {e} (key: {k})"),
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
