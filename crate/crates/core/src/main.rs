use std::process::ExitCode;

fn main() -> ExitCode {
    if let Err(e) = dwcaps::cli::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    ExitCode::from(dwcaps::cli::run(std::env::args_os()) as u8)
}
