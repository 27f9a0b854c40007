use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msentropy_cli::{execute, Command, Options};

#[derive(Parser)]
#[command(name = "msentropy", version, about = "Maxwell-Stefan reaction-diffusion entropy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Conservation laws, balance status and boundary equilibria.
    Analyze(Args),
    /// Positive equilibrium for the configured mass vector.
    Equilibrium(Args),
    /// Run the implicit scheme and write diagnostics.
    Simulate(Args),
    /// Run the inequality checks.
    Verify(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the verification sweeps.
    #[arg(long)]
    jobs: Option<usize>,
    /// Run the boundary scan even for more than 16 species.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Analyze(a) => (Command::Analyze, a),
        Cmd::Equilibrium(a) => (Command::Equilibrium, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Verify(a) => (Command::Verify, a),
    };
    let opts = Options {
        seed: args.seed,
        jobs: args.jobs,
        force: args.force,
        out_dir: std::env::var_os("MSENTROPY_OUT").map(PathBuf::from),
    };
    match execute(cmd, &args.config, &opts) {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}: {} ({})", cmd.name(), out.status, out.report_path.display());
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
