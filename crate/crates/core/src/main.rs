use std::process::ExitCode;

use clap::Parser;
use fedspectra::cli::{execute, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outputs) => {
            for p in outputs {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("fedspectra {}: {e}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}
