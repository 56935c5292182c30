use std::process::ExitCode;
use std::str::FromStr;

use clap::Parser;
use fclust_cli::error::CliError;
use fclust_cli::pipeline::StageStatus;
use fclust_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match log::LevelFilter::from_str(&cli.log_level) {
        Ok(l) => l,
        Err(_) => {
            let err = CliError::validation(format!("unknown log level {:?}", cli.log_level));
            eprintln!("{}", err.diagnostic());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match execute(&cli) {
        Ok(statuses) => {
            for (name, status) in statuses {
                let s = match status {
                    StageStatus::Ran => "ran",
                    StageStatus::Skipped => "skipped",
                };
                println!("{name}\t{s}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.diagnostic());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
