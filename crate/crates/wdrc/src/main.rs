use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(wdrc::cli::run(std::env::args()) as u8)
}
