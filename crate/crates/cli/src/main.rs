use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(cpa_cli::run(std::env::args()) as u8)
}
