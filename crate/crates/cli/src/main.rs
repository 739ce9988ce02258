use std::process::ExitCode;

use clap::Parser;
use ldpm_cli::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match ldpm_cli::run(&cli) {
        Ok(manifest) => {
            println!("{}", serde_json::to_string_pretty(&manifest.metrics).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
