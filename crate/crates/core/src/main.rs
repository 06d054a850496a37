use std::process::ExitCode;

use clap::Parser;
use faconformer::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FACONF_LOG", "error")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("faconf: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
