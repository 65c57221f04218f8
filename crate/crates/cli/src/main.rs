use std::io::Write;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use mamba_cli::{Cli, CliError};

fn main() -> ExitCode {
    // Help and version go through clap untouched; every other parse failure
    // becomes a single error line like any runtime failure.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return fail(CliError::Usage(e.to_string())),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = cli
        .shared
        .resolve()
        .and_then(|shared| mamba_cli::execute(cli.command, shared, &mut out));
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.one_line());
    ExitCode::from(e.exit_code() as u8)
}
