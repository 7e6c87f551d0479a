use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = iiloss_cli::Cli::parse();
    match iiloss_cli::run(cli, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
