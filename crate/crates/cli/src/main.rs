use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mbsde_cli::{run_file, Format, Overrides};

/// Solve a delayed multivalued BSDE described by a TOML config and write the report.
#[derive(Debug, Parser)]
#[command(name = "mbsde", version)]
struct Args {
    /// Problem config (TOML).
    config: PathBuf,

    /// Output directory (overrides `output.dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Report format (overrides `output.format`).
    #[arg(long, value_enum)]
    format: Option<Format>,

    /// Fail instead of warning when K e^(beta T) >= 6 L^2.
    #[arg(long)]
    hard_gate: bool,

    /// Cap on scenario tree nodes.
    #[arg(long, value_name = "N")]
    max_nodes: Option<usize>,

    /// Exponential weight used by the gate and all norms.
    #[arg(long, value_name = "B")]
    beta: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let overrides = Overrides {
        out: args.out,
        format: args.format,
        hard_gate: args.hard_gate,
        max_nodes: args.max_nodes,
        beta: args.beta,
    };
    match run_file(&args.config, &overrides) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
