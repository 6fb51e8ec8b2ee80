use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use artiscope_cli::args::Cli;
use artiscope_cli::commands;
use artiscope_cli::error::CliError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let e = CliError::Usage(e.to_string().trim_end().to_string());
            eprintln!("{}", e.to_json());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
