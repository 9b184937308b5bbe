use std::io::{self, Write};
use std::process::ExitCode;

mod manifest;
mod run;

use manifest::{parse_args, ArgsError, Command};

/// Exit status when uncorrectable and silent trials dominate.
const EXIT_FAILURES: u8 = 1;
/// Exit status for configuration and I/O errors.
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let manifest = match parse_args(std::env::args_os()) {
        Ok(Command::Run(m)) => m,
        Ok(Command::DumpManifest(m)) => {
            println!("{}", serde_json::to_string_pretty(&m).expect("manifest serialises"));
            return ExitCode::SUCCESS;
        }
        Err(ArgsError::Clap(e)) => e.exit(),
        Err(ArgsError::Invalid(e)) => {
            eprintln!("efta: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };

    let outcome = match run::execute(&manifest) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("efta: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(dir) = &manifest.out {
        if let Err(e) = run::write_outputs(dir, &manifest, &outcome) {
            eprintln!("efta: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let mut stdout = io::stdout().lock();
    // a closed pipe is not worth failing the run over
    let _ = run::print_summary(&mut stdout, &manifest, &outcome).and_then(|_| stdout.flush());

    if outcome.failure_dominated() {
        eprintln!("efta: uncorrectable or silent outcomes in more than half of the faulted trials");
        ExitCode::from(EXIT_FAILURES)
    } else {
        ExitCode::SUCCESS
    }
}
